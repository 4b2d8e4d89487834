import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refer_marl import clipped_normal as cn
from refer_marl import core
from refer_marl.clipped_normal import Bounds
from refer_marl.core import DynamicsModel as D
from refer_marl.core import Scalarization as S
from refer_marl.verify import fd_error, fd_gradient


def test_parse_variant():
    assert core.parse_variant("FDCo") == (D.FULL, S.COOPERATIVE)
    assert core.parse_variant("LDI") == (D.LOCAL, S.INDIVIDUAL)
    with pytest.raises(ValueError):
        core.parse_variant("ldi")


def test_scalarize_examples():
    assert core.scalarize([1, 2, 3], 2, S.INDIVIDUAL) == 3
    assert core.scalarize([1, 2, 3], 0, S.COOPERATIVE) == 2
    with pytest.raises(IndexError):
        core.scalarize([1, 2, 3], 3, S.INDIVIDUAL)


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)))
def test_cooperative_scalarization_is_agent_independent(r):
    vals = {core.scalarize(r, i, S.COOPERATIVE) for i in range(len(r))}
    assert len(vals) == 1
    assert np.array_equal(core.scalarize_agents(r, S.INDIVIDUAL), r)


def test_joint_iw_examples():
    assert core.joint_iw([0.5, 2.0, 1.0], D.FULL, 0) == 1.0
    assert core.joint_iw([0.5, 2.0, 1.0], D.LOCAL, 1) == 2.0
    assert core.joint_iw([1.0, 1.0, 1.0, 1.0], D.FULL, 3) == 1.0


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(0.01, 10)))
def test_leave_one_out_product(x):
    got = core.leave_one_out_prod(x)
    for i in range(x.shape[1]):
        assert np.allclose(got[:, i], np.prod(np.delete(x, i, axis=1), axis=1), rtol=1e-12, atol=0)


def test_qret_examples():
    assert abs(core.qret(1.0, 2.0, 0.995) - 2.99) < 1e-15
    assert core.qret(1.5, 7.0, 0.0) == 1.5
    assert core.qret(1.5, 0.0, 0.995) == 1.5


def test_value_and_policy_grad_zero_cases():
    d = np.array([0.3, -1.0, 2.0])
    assert np.all(core.value_grad(0.7, 0.7, d) == 0.0)
    assert np.all(core.policy_grad(0.0, d) == 0.0)
    assert np.array_equal(core.value_grad(1.0, 0.5, d), 0.5 * d)


def test_refer_blend_cases():
    g, gkl = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    assert np.array_equal(core.refer_blend(g, gkl, 1.0, True), -g)
    assert np.array_equal(core.refer_blend(g, gkl, 0.0, True), gkl)
    assert np.array_equal(core.refer_blend(g, gkl, 0.0, False), gkl)
    assert np.array_equal(core.refer_blend(g, gkl, 0.3, False), 0.7 * gkl)


def test_classify_boundaries():
    assert core.classify(1.0, 4.0) is True
    assert core.classify(4.0, 4.0) is False
    assert core.classify(0.25, 4.0) is False
    assert core.classify(0.2, 4.0) is False
    assert core.classify(np.nextafter(4.0, 0), 4.0) is True
    assert core.classify(np.nextafter(0.25, 1), 4.0) is True


@given(st.floats(1e-6, 1e6), st.floats(1.0001, 100), st.floats(1.0, 10))
def test_classify_window_grows_with_cmax(rho, c, k):
    # anything near-policy under c stays near-policy under a wider window
    if core.classify(rho, c):
        assert core.classify(rho, c * k)


def test_update_beta_example():
    st_ = core.ReFERState(beta=0.3, f_star=0.1, eta_beta=1e-4)
    assert abs(core.update_beta(st_, 0.2).beta - 0.29997) < 1e-15


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-6, 1))
def test_update_beta_stays_in_unit_interval(beta, f_off, eta):
    out = core.update_beta(core.ReFERState(beta=beta, eta_beta=eta), f_off)
    assert 0.0 <= out.beta <= 1.0


def test_update_beta_fixed_points():
    hi = lo = core.ReFERState(beta=0.3, eta_beta=1e-2)
    for _ in range(3000):
        hi = core.update_beta(hi, 0.0)
        lo = core.update_beta(lo, 0.5)
    assert abs(hi.beta - 1.0) < 1e-6 and lo.beta < 1e-6


# -- heads -------------------------------------------------------------------------

HEADS = [core.ContinuousHead(2, Bounds(-1.0, 1.0)), core.DiscreteHead(5)]


def _head_case(head, rng):
    raw = rng.normal(scale=0.7, size=head.raw_dim)
    beh = head.params(rng.normal(scale=0.7, size=head.raw_dim))
    act = head.sample(beh, rng)
    return raw, beh, act


@pytest.mark.parametrize("head", HEADS, ids=["continuous", "discrete"])
def test_head_iw_grad_raw_matches_fd(head):
    rng = np.random.default_rng(0)
    for _ in range(30):
        raw, beh, act = _head_case(head, rng)
        rho, g = head.iw_grad_raw(act, raw, beh)
        assert abs(rho - head.iw(act, head.params(raw), beh)) <= 1e-14 * max(1.0, rho)
        ok, err = fd_error(g, fd_gradient(lambda x: float(head.iw(act, head.params(x), beh)), raw))
        assert ok, err


def _guarded(head, beh, raw):
    # the clipped-normal guard clamps tiny atom masses on purpose; FD of the exact KL does not apply there
    if head.discrete:
        return False
    cur = head.params(raw)
    return bool(np.any(cn.kl_grad(head._split(beh), head._split(cur), head.bounds).clamped))


@pytest.mark.parametrize("head", HEADS, ids=["continuous", "discrete"])
def test_head_kl_grad_raw_matches_fd(head):
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(40):
        raw, beh, _ = _head_case(head, rng)
        g = head.kl_grad_raw(beh, raw)
        assert np.all(np.isfinite(g))
        if _guarded(head, beh, raw):
            continue
        ok, err = fd_error(g, fd_gradient(lambda x: float(head.kl(beh, head.params(x))), raw))
        assert ok, err
        checked += 1
    assert checked >= 30


@pytest.mark.parametrize("head", HEADS, ids=["continuous", "discrete"])
def test_kl_reg_grad_zero_at_behavior(head):
    raw = np.random.default_rng(2).normal(size=head.raw_dim)
    jac = np.random.default_rng(3).normal(size=(head.raw_dim, 7))
    assert np.all(np.abs(core.kl_reg_grad(head, head.params(raw), raw, jac)) <= 1e-8)


# -- minibatch gradients ---------------------------------------------------------------

def _batch(head, B, N, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(scale=0.5, size=(B, N, head.raw_dim))
    beh = head.params(raw + rng.normal(scale=0.3, size=raw.shape))
    act = head.sample(beh, rng)
    return dict(values=rng.normal(size=(B, N)), raw=raw, actions=act, behavior=beh, rewards=rng.normal(size=(B, N)),
                vtbc=rng.normal(size=(B, N)), vtbc_next=rng.normal(size=(B, N)))


@pytest.mark.parametrize("head", HEADS, ids=["continuous", "discrete"])
def test_single_agent_variants_agree(head):
    b = _batch(head, 8, 1, 4)
    grads = [core.head_gradients(head, **b, gamma=0.99, c_max=4.0, dynamics=d, scalar=s)
             for d, s in core.VARIANTS.values()]
    for g in grads[1:]:
        for name in ("d_value", "d_pg", "d_kl", "rho", "on_policy"):
            assert np.array_equal(getattr(g, name), getattr(grads[0], name)), name


def test_beta_zero_keeps_only_kl_direction():
    head = HEADS[1]
    hg = core.head_gradients(head, **_batch(head, 6, 3, 5), gamma=0.99, c_max=4.0, dynamics=D.LOCAL,
                             scalar=S.INDIVIDUAL)
    assert np.array_equal(hg.policy_out(0.0), hg.d_kl)


def test_far_policy_samples_carry_no_policy_gradient():
    head = HEADS[0]
    hg = core.head_gradients(head, **_batch(head, 16, 2, 6), gamma=0.99, c_max=1.05, dynamics=D.FULL,
                             scalar=S.COOPERATIVE)
    far = ~hg.on_policy
    assert far.any()
    assert np.array_equal(hg.policy_out(0.4)[far], 0.6 * hg.d_kl[far])


@pytest.mark.parametrize("variant", list(core.VARIANTS))
def test_identical_minibatch_equals_single_element(variant):
    head = HEADS[1]
    one = _batch(head, 1, 3, 7)
    many = {k: np.repeat(v, 5, axis=0) for k, v in one.items()}
    d, s = core.VARIANTS[variant]
    g1 = core.head_gradients(head, **one, gamma=0.9, c_max=4.0, dynamics=d, scalar=s)
    g5 = core.head_gradients(head, **many, gamma=0.9, c_max=4.0, dynamics=d, scalar=s)
    # per-sample contributions are scaled by 1/(B N), so five copies sum to the single-element gradient
    for name in ("d_value", "d_pg", "d_kl"):
        assert np.allclose(getattr(g5, name).sum(axis=0), getattr(g1, name)[0], rtol=1e-13, atol=1e-16)
