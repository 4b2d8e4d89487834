import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refer_marl import boltzmann as bz
from refer_marl.verify import fd_error, fd_gradient

energies = arrays(np.float64, st.integers(2, 7), elements=st.floats(-5, 5))


def params(e, b):
    return bz.BoltzmannParams(np.asarray(e, dtype=float), float(b))


def test_probs_examples():
    assert np.allclose(bz.probs(params([1, 1, 1], 2.0)), [1 / 3] * 3, atol=1e-15)
    assert np.allclose(bz.probs(params([3.0, -1.0, 7.0, 0.5], 0.0)), [0.25] * 4, atol=1e-15)
    assert np.allclose(bz.probs(params([0.0, math.log(2.0)], 1.0)), [2 / 3, 1 / 3], atol=1e-15)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-1e3, 1e3)), st.floats(0, 1e2))
def test_probs_normalised_for_extreme_inputs(e, b):
    p = bz.probs(params(e, b))
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12


@given(energies, st.floats(1e-3, 10))
def test_greedy_is_lowest_energy(e, b):
    # ties resolve towards the lowest index among the minimal energies
    assert bz.greedy(params(e, b)) == int(np.flatnonzero(e == e.min())[0]) or \
        np.isclose(bz.probs(params(e, b)).max(), bz.probs(params(e, b))[int(np.argmin(e))])


def test_greedy_tie_breaks_low():
    assert bz.greedy(params([0.5, 0.1, 0.1, 0.9], 1.0)) == 1


@given(energies, st.floats(0, 10), st.floats(-100, 100))
def test_shift_invariance(e, b, c):
    assert np.allclose(bz.probs(params(e + c, b)), bz.probs(params(e, b)), rtol=0, atol=1e-12)


def test_shift_invariance_exact_for_dyadic_values():
    e = np.array([0.25, -1.5, 2.0, 0.75])
    assert np.array_equal(bz.probs(params(e + 8.0, 0.5)), bz.probs(params(e, 0.5)))


def test_sample_frequencies_uniform_at_zero_temperature():
    n = 100_000
    p = bz.BoltzmannParams(np.zeros((n, 5)), np.zeros(n))
    a = bz.sample(p, np.random.default_rng(0))
    counts = np.bincount(a, minlength=5)
    sd = math.sqrt(n * 0.2 * 0.8)
    assert np.all(np.abs(counts - n / 5) <= 4 * sd)


def test_kl_discrete_examples():
    assert bz.kl_discrete([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert abs(bz.kl_discrete([1.0, 0.0], [0.5, 0.5]) - math.log(2)) <= 1e-15
    assert bz.kl_discrete([0.5, 0.5], [1.0, 0.0]) == math.inf


def test_kl_discrete_against_extended_precision():
    rng = np.random.default_rng(1)
    mpmath.mp.dps = 40
    for _ in range(100):
        p = rng.dirichlet(np.ones(5))
        q = rng.dirichlet(np.ones(5))
        ref = sum(mpmath.mpf(pi) * mpmath.log(mpmath.mpf(pi) / mpmath.mpf(qi)) for pi, qi in zip(p, q))
        assert abs(bz.kl_discrete(p, q) - float(ref)) <= 1e-12


def _flat_grad(g):
    return np.concatenate([g.d_energies, [g.d_inv_temp]])


def test_kl_grad_zero_at_minimum():
    q = params([0.3, -0.2, 1.0], 1.7)
    assert np.all(np.abs(_flat_grad(bz.kl_grad_discrete(bz.probs(q), q))) <= 1e-10)


def test_kl_grad_uniform_symmetry():
    g = bz.kl_grad_discrete(np.full(4, 0.25), params([0.1, 0.5, -0.3, 2.0], 0.0))
    assert np.allclose(g.d_energies, g.d_energies[0])


@settings(max_examples=100, deadline=None)
@given(energies, st.floats(0.1, 3), st.integers(0, 2 ** 31))
def test_kl_grad_matches_finite_differences(e, b, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(len(e)))
    g = bz.kl_grad_discrete(p, params(e, b))
    num = fd_gradient(lambda x: bz.kl_discrete(p, bz.probs(params(x[:-1], x[-1]))), np.append(e, b))
    ok, err = fd_error(_flat_grad(g), num)
    assert ok and err <= 1e-5


def test_iw_examples():
    q = params([0.4, -0.1, 0.2], 1.3)
    assert abs(bz.iw_discrete(1, q, bz.probs(q)) - 1.0) <= 1e-15
    conc = params([100.0, 100.0, 0.0, 100.0, 100.0], 50.0)
    assert abs(bz.iw_discrete(2, conc, np.full(5, 0.2)) - 5.0) <= 1e-12


def test_iw_errors():
    with pytest.raises(bz.InvalidExperience):
        bz.iw_discrete(0, params([0, 0], 1.0), np.array([0.0, 1.0]))
    with pytest.raises(IndexError):
        bz.iw_discrete(3, params([0, 0], 1.0), np.array([0.5, 0.5]))


def test_iw_grad_uniform_symmetry():
    g = bz.iw_grad_discrete(1, params([0.7, 0.7, 0.7], 2.0), np.full(3, 1 / 3))
    assert abs(g.d_inv_temp) <= 1e-15


@settings(max_examples=100, deadline=None)
@given(energies, st.floats(0.1, 3), st.integers(0, 2 ** 31))
def test_iw_grad_matches_finite_differences(e, b, seed):
    rng = np.random.default_rng(seed)
    beh = rng.dirichlet(np.ones(len(e)))
    a = int(rng.integers(len(e)))
    g = bz.iw_grad_discrete(a, params(e, b), beh)
    num = fd_gradient(lambda x: bz.iw_discrete(a, params(x[:-1], x[-1]), beh), np.append(e, b))
    ok, err = fd_error(_flat_grad(g), num)
    assert ok and err <= 1e-5


@given(energies, st.floats(0.1, 3), st.floats(-4, 4))
def test_iw_and_beta_gradient_shift_invariant(e, b, c):
    beh = np.full(len(e), 1.0 / len(e))
    g0, g1 = bz.iw_grad_discrete(0, params(e, b), beh), bz.iw_grad_discrete(0, params(e + c, b), beh)
    assert abs(bz.iw_discrete(0, params(e, b), beh) - bz.iw_discrete(0, params(e + c, b), beh)) <= 1e-12
    assert abs(g0.d_inv_temp - g1.d_inv_temp) <= 1e-9
