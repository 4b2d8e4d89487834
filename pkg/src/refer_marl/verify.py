"""Numerical self-checks of the policy mathematics, the learning rule and V-trace.

Every check compares library code against an independent oracle (adaptive
quadrature, central finite differences, a closed-form unrolled recursion or
Monte Carlo) and reports the worst error it saw.  Library functions are
looked up through their modules at call time so a patched function is what
gets checked.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, special

from . import boltzmann as bz
from . import clipped_normal as cn
from . import core
from . import net as nn
from . import replay

FD_STEP = 1e-5
FD_REL_TOL = 1e-4
FD_ABS_TOL = 1e-8
FD_SMALL = 1e-6
KL_TOL = 1e-6
VTRACE_TOL = 1e-12
BETA_TOL = 1e-6
BETA_MAX_ITERS = 200_000
MC_SIGMAS = 4.0

BND = cn.Bounds(-1.0, 1.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    max_err: float
    tol: float
    metric: str
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return (f"{tag} {self.name:<28} cases={self.cases:<6} {self.metric}={self.max_err:.3e} "
                f"(tol {self.tol:.0e}) {self.seconds:.2f}s{extra}")


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def _ndtr(x, mu, sigma):
    return special.ndtr((x - mu) / sigma)


def kl_oracle(p: cn.GaussParams, q: cn.GaussParams, bnd: cn.Bounds = BND) -> float:
    """KL of two clipped normals: exact atom terms plus adaptive quadrature of the interior."""
    a, b = bnd
    pa, qa = _ndtr(a, p.mu, p.sigma), _ndtr(a, q.mu, q.sigma)
    # upper tail as ndtr(-z): 1 - ndtr(z) cancels catastrophically far out
    pb, qb = special.ndtr((p.mu - b) / p.sigma), special.ndtr((q.mu - b) / q.sigma)

    def log_n(x, m, s):
        return -0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)

    def integrand(x):
        lp = log_n(x, p.mu, p.sigma)
        return math.exp(lp) * (lp - log_n(x, q.mu, q.sigma))

    interior, _ = integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)
    return pa * math.log(pa / qa) + interior + pb * math.log(pb / qb)


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP,
                richardson: bool = False) -> np.ndarray:
    """Central differences; ``richardson`` combines steps h and h/2 to cancel the O(h^2) error."""
    x = np.array(x, dtype=float)
    if richardson:
        return (4.0 * fd_gradient(f, x, h / 2) - fd_gradient(f, x, h)) / 3.0
    g = np.empty_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[k] += h
        xm.flat[k] -= h
        g.flat[k] = (f(xp) - f(xm)) / (2 * h)
    return g


def fd_error(analytic, numeric) -> tuple[bool, float]:
    """(all components within tolerance, worst relative error among non-tiny components)."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    if a.shape != n.shape or not np.all(np.isfinite(a)):
        return False, math.inf
    mag = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    big = mag >= FD_SMALL
    rel = np.where(big, diff / np.where(big, mag, 1.0), 0.0)
    ok = bool(np.all(np.where(big, rel <= FD_REL_TOL, diff <= FD_ABS_TOL)))
    return ok, float(rel.max(initial=0.0))


def vtrace_oracle(values, rewards, rho_bar, v_end, gamma: float) -> np.ndarray:
    """Unrolled form: V_t + sum_k gamma^(k-t) (prod_{m=t..k} rho_bar_m) delta_k, in plain floats."""
    T, N = len(values), len(values[0])
    out = np.zeros((T, N))
    for i in range(N):
        v = [float(values[t][i]) for t in range(T)] + [float(v_end[i])]
        for t in range(T):
            acc, trace = 0.0, 1.0
            for k in range(t, T):
                trace *= float(rho_bar[k][i])
                delta = float(rewards[k][i]) + gamma * v[k + 1] - v[k]
                acc += gamma ** (k - t) * trace * delta
            out[t, i] = v[t] + acc
    return out


# ---------------------------------------------------------------------------
# random cases
# ---------------------------------------------------------------------------

def _gauss(rng) -> cn.GaussParams:
    return cn.GaussParams(float(rng.uniform(-0.8, 0.8)), float(rng.uniform(0.2, 1.5)))


def _boltz(rng, n: int = 5) -> bz.BoltzmannParams:
    return bz.BoltzmannParams(rng.normal(size=n), float(rng.uniform(0.3, 2.0)))


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _fd_result(name, pairs) -> CheckResult:
    worst, ok_all, n = 0.0, True, 0
    for analytic, numeric in pairs:
        ok, err = fd_error(analytic, numeric)
        ok_all &= ok
        worst = max(worst, err)
        n += 1
    return CheckResult(name, ok_all, n, worst, FD_REL_TOL, "max_rel_err")


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

@_timed
def check_kl_quadrature(cases: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        p, q = _gauss(rng), _gauss(rng)
        worst = max(worst, abs(float(cn.kl(p, q, BND)) - kl_oracle(p, q)))
    return CheckResult("kl_quadrature", worst <= KL_TOL, cases, worst, KL_TOL, "max_abs_err")


@_timed
def check_kl_grad(cases: int = 50, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)

    def pairs():
        for _ in range(cases):
            p, q = _gauss(rng), _gauss(rng)
            g = cn.kl_grad(p, q, BND)
            num = fd_gradient(lambda x: float(cn.kl(p, cn.GaussParams(x[0], x[1]), BND)), [q.mu, q.sigma])
            yield [g.d_mu, g.d_sigma], num
    return _fd_result("kl_grad", pairs())


def _check_iw_branch(branch: str, cases: int, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)

    def pairs():
        for _ in range(cases):
            q, p = _gauss(rng), _gauss(rng)
            x = {"lo": BND.lo, "hi": BND.hi}.get(branch)
            if x is None:
                x = float(rng.uniform(-0.99, 0.99))
            g = cn.iw_grad(x, q, p, BND)
            num = fd_gradient(lambda v: float(cn.iw(x, cn.GaussParams(v[0], v[1]), p, BND)), [q.mu, q.sigma])
            yield [g.d_mu, g.d_sigma], num
    return _fd_result(f"iw_grad[{branch}]", pairs())


@_timed
def check_iw_grad_lo(cases: int = 50, seed: int = 2) -> CheckResult:
    return _check_iw_branch("lo", cases, seed)


@_timed
def check_iw_grad_interior(cases: int = 50, seed: int = 3) -> CheckResult:
    return _check_iw_branch("interior", cases, seed)


@_timed
def check_iw_grad_hi(cases: int = 50, seed: int = 4) -> CheckResult:
    return _check_iw_branch("hi", cases, seed)


@_timed
def check_kl_grad_discrete(cases: int = 50, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)

    def pairs():
        for _ in range(cases):
            p = bz.probs(_boltz(rng))
            q = _boltz(rng)
            g = bz.kl_grad_discrete(p, q)
            x0 = np.concatenate([q.energies, [q.inv_temp]])
            num = fd_gradient(lambda x: float(bz.kl_discrete(p, bz.probs(bz.BoltzmannParams(x[:-1], x[-1])))), x0)
            yield np.concatenate([g.d_energies, [g.d_inv_temp]]), num
    return _fd_result("kl_grad_discrete", pairs())


@_timed
def check_iw_grad_discrete(cases: int = 50, seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)

    def pairs():
        for _ in range(cases):
            beh = bz.probs(_boltz(rng))
            q = _boltz(rng)
            a = int(rng.integers(len(beh)))
            g = bz.iw_grad_discrete(a, q, beh)
            x0 = np.concatenate([q.energies, [q.inv_temp]])
            num = fd_gradient(lambda x: float(bz.iw_discrete(a, bz.BoltzmannParams(x[:-1], x[-1]), beh)), x0)
            yield np.concatenate([g.d_energies, [g.d_inv_temp]]), num
    return _fd_result("iw_grad_discrete", pairs())


def _toy_params(rng, layout: nn.NetLayout) -> nn.NetworkParams:
    params = nn.init(layout, int(rng.integers(2 ** 31)))
    # move away from the small-output initialisation so every layer matters
    params.flat[:] += rng.normal(scale=0.3, size=params.flat.shape)
    return params


def _with_flat(params: nn.NetworkParams, flat: np.ndarray) -> nn.NetworkParams:
    return nn.NetworkParams(params.layout, np.array(flat, dtype=float))


@_timed
def check_net_backward(cases: int = 50, seed: int = 7) -> CheckResult:
    rng = np.random.default_rng(seed)

    def pairs():
        for _ in range(cases):
            layout = nn.NetLayout(int(rng.integers(2, 5)), tuple(int(h) for h in rng.integers(2, 6, size=2)),
                                  1, int(rng.integers(1, 4)))
            params = _toy_params(rng, layout)
            B = int(rng.integers(1, 4))
            states = rng.normal(size=(B, layout.input_dim))
            cv = rng.normal(size=B)
            cp = rng.normal(size=(B, layout.policy_out))

            def loss(flat):
                v, pol = nn.forward_batch(_with_flat(params, flat), states)
                return float(cv @ v + np.sum(cp * pol))
            yield nn.backward_batch(params, states, cv, cp), fd_gradient(loss, params.flat)
    return _fd_result("net_backward", pairs())


def blended_objective(head, params, states, actions, behavior, targets, advantage, on_policy, beta, variant):
    """Scalar whose parameter gradient is the blended update direction.

    Targets, advantages and the near-policy mask are frozen at their values
    from the point of linearisation, as they are in a training step.
    """
    dynamics, scalar = core.parse_variant(variant)
    B, N = targets.shape
    v, raw = nn.forward_batch(params, states.reshape(B * N, -1))
    v = v.reshape(B, N)
    raw = raw.reshape(B, N, -1)
    cur = head.params(raw)
    v_f = core.scalarize_agents(v, scalar)
    value_term = 0.5 * np.sum((v_f - targets) ** 2)
    local = head.iw(actions, cur, behavior)
    if dynamics is core.DynamicsModel.LOCAL:
        pg_term = np.sum(np.where(on_policy, advantage * local, 0.0))
    else:
        joint = np.prod(local, axis=-1) * advantage.sum(axis=-1)
        pg_term = np.sum(np.where(on_policy[:, 0], joint, 0.0))
    kl_term = np.sum(head.kl(behavior, cur))
    return (value_term - beta * pg_term + (1.0 - beta) * kl_term) / (B * N)


def _blended_case(rng):
    variant = str(rng.choice(sorted(core.VARIANTS)))
    continuous = bool(rng.integers(2))
    head = core.ContinuousHead(2, BND) if continuous else core.DiscreteHead(4)
    B, N = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    layout = nn.NetLayout(3, (5, 4), 1, head.raw_dim)
    params = _toy_params(rng, layout)
    states = rng.normal(size=(B, N, 3))
    _, raw = nn.forward_batch(params, states.reshape(B * N, -1))
    raw = raw.reshape(B, N, -1)
    # behavior = a perturbed copy of the current policy, so both near- and far-policy samples occur
    behavior = head.params(raw + rng.normal(scale=0.5, size=raw.shape))
    actions = head.sample(behavior, rng)
    rewards = rng.normal(size=(B, N))
    vtbc = rng.normal(size=(B, N))
    vtbc_next = rng.normal(size=(B, N))
    return variant, head, params, states, actions, behavior, rewards, vtbc, vtbc_next


@_timed
def check_blended_gradient(cases: int = 50, seed: int = 8) -> CheckResult:
    rng = np.random.default_rng(seed)
    gamma, c_max = 0.9, 2.0

    def pairs():
        for _ in range(cases):
            variant, head, params, states, actions, behavior, rewards, vtbc, vtbc_next = _blended_case(rng)
            dynamics, scalar = core.parse_variant(variant)
            B, N = vtbc.shape
            flat_states = states.reshape(B * N, -1)
            v, raw, cache = nn.forward_batch(params, flat_states, keep_cache=True)
            hg = core.head_gradients(head, v.reshape(B, N), raw.reshape(B, N, -1), actions, behavior, rewards,
                                     vtbc, vtbc_next, gamma, c_max, dynamics, scalar)
            beta = float(rng.uniform(0.1, 0.9))
            grad = nn.backward_batch(params, flat_states, hg.d_value.reshape(-1),
                                     hg.policy_out(beta).reshape(B * N, -1), cache)
            targets = core.scalarize_agents(vtbc, core.Scalarization.INDIVIDUAL)

            def loss(flat):
                return float(blended_objective(head, _with_flat(params, flat), states, actions, behavior, targets,
                                               hg.advantage, hg.on_policy, beta, variant))
            yield grad, fd_gradient(loss, params.flat)
    return _fd_result("blended_gradient", pairs())


@_timed
def check_vtrace(cases: int = 1000, seed: int = 9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        T, N = int(rng.integers(1, 11)), int(rng.integers(1, 4))
        scalar = core.Scalarization.COOPERATIVE if rng.integers(2) else core.Scalarization.INDIVIDUAL
        values = rng.normal(size=(T, N))
        ep = replay.Episode(states=np.zeros((T, N, 1)), actions=np.zeros((T, N), dtype=np.int64),
                            rewards=rng.normal(size=(T, N)), behavior=np.zeros((T, N, 2)), values=values,
                            terminal_states=np.zeros((N, 1)), terminal_values=rng.normal(size=N),
                            absorbing=bool(rng.integers(2)))
        rho_bar = rng.uniform(0.0, 1.0, size=(T, N))
        gamma = float(rng.uniform(0.5, 1.0))
        got = replay.compute_vtbc(ep, values, rho_bar, gamma, scalar)
        boot = np.zeros(N) if ep.absorbing else ep.terminal_values
        want = vtrace_oracle(core.scalarize_agents(values, scalar), core.scalarize_agents(ep.rewards, scalar),
                             rho_bar, core.scalarize_agents(boot, scalar), gamma)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return CheckResult("vtrace_bruteforce", worst <= VTRACE_TOL, cases, worst, VTRACE_TOL, "max_abs_err")


@_timed
def check_beta_fixed_points(max_iters: int = BETA_MAX_ITERS) -> CheckResult:
    worst = 0.0
    iters_used = []
    for f_off, target in ((0.5, 0.0), (0.0, 1.0)):
        st = core.ReFERState(beta=0.5, eta_beta=1e-4)
        for k in range(1, max_iters + 1):
            st = core.update_beta(st, f_off)
            if abs(st.beta - target) <= BETA_TOL:
                break
        iters_used.append(k)
        worst = max(worst, abs(st.beta - target))
    # strict window: the cut-offs themselves are far-policy
    c = 4.0
    boundary_ok = (not core.classify(c, c) and not core.classify(1.0 / c, c)
                   and core.classify(np.nextafter(c, 0.0), c) and core.classify(np.nextafter(1.0 / c, 1.0), c)
                   and core.classify(1.0, c))
    passed = worst <= BETA_TOL and boundary_ok
    detail = f"iterations={iters_used} classify_boundary={'ok' if boundary_ok else 'WRONG'}"
    return CheckResult("beta_fixed_points", passed, 2, worst, BETA_TOL, "max_abs_err", detail=detail)


@_timed
def check_partition_of_unity(cases: int = 50, samples: int = 1_000_000, seed: int = 10) -> CheckResult:
    """Atoms plus interior integrate to one; empirical atom frequencies match the atom masses."""
    rng = np.random.default_rng(seed)
    worst_mass, worst_z, mc_cases = 0.0, 0.0, min(cases, 5)
    for k in range(cases):
        p = _gauss(rng)
        lo, hi = cn.atom_masses(p, BND)
        interior, _ = integrate.quad(lambda x: float(cn.norm_pdf(x, p.mu, p.sigma)), BND.lo, BND.hi,
                                     epsabs=1e-14, epsrel=1e-13)
        worst_mass = max(worst_mass, abs(float(lo) + interior + float(hi) - 1.0))
        if k < mc_cases:
            x = cn.sample(cn.GaussParams(np.full(samples, p.mu), np.full(samples, p.sigma)), BND, rng)
            for freq, m in ((np.mean(x == BND.lo), float(lo)), (np.mean(x == BND.hi), float(hi))):
                se = math.sqrt(max(m * (1 - m), 1e-300) / samples)
                worst_z = max(worst_z, abs(freq - m) / se)
    passed = worst_mass <= 1e-10 and worst_z <= MC_SIGMAS
    return CheckResult("partition_of_unity", passed, cases, worst_z, MC_SIGMAS, "max_sigmas",
                       detail=f"max_mass_err={worst_mass:.1e} mc_cases={mc_cases} samples={samples}")


@_timed
def check_iw_normalization(cases: int = 5, samples: int = 1_000_000, seed: int = 11) -> CheckResult:
    """E_{x~behavior}[q(x)/p(x)] = 1 for clipped normals and Boltzmann policies."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        p, q = _gauss(rng), _gauss(rng)
        x = cn.sample(cn.GaussParams(np.full(samples, p.mu), np.full(samples, p.sigma)), BND, rng)
        w = np.asarray(cn.iw(x, q, p, BND))
        worst = max(worst, abs(w.mean() - 1.0) / (w.std(ddof=1) / math.sqrt(samples)))

        beh, cur = _boltz(rng), _boltz(rng)
        a = bz.sample(bz.BoltzmannParams(np.tile(beh.energies, (samples, 1)), np.full(samples, beh.inv_temp)), rng)
        w = np.asarray(bz.iw_discrete(a, bz.BoltzmannParams(np.tile(cur.energies, (samples, 1)),
                                                             np.full(samples, cur.inv_temp)),
                                      np.tile(bz.probs(beh), (samples, 1))))
        worst = max(worst, abs(w.mean() - 1.0) / (w.std(ddof=1) / math.sqrt(samples)))
    return CheckResult("iw_normalization", worst <= MC_SIGMAS, 2 * cases, worst, MC_SIGMAS, "max_sigmas",
                       detail=f"samples={samples}")


CHECKS = {
    "kl_quadrature": (check_kl_quadrature, {"cases": 40}),
    "kl_grad": (check_kl_grad, {"cases": 10}),
    "iw_grad_lo": (check_iw_grad_lo, {"cases": 10}),
    "iw_grad_interior": (check_iw_grad_interior, {"cases": 10}),
    "iw_grad_hi": (check_iw_grad_hi, {"cases": 10}),
    "kl_grad_discrete": (check_kl_grad_discrete, {"cases": 10}),
    "iw_grad_discrete": (check_iw_grad_discrete, {"cases": 10}),
    "net_backward": (check_net_backward, {"cases": 10}),
    "blended_gradient": (check_blended_gradient, {"cases": 10}),
    "vtrace_bruteforce": (check_vtrace, {"cases": 200}),
    "beta_fixed_points": (check_beta_fixed_points, {}),
    "partition_of_unity": (check_partition_of_unity, {"cases": 10, "samples": 100_000}),
    "iw_normalization": (check_iw_normalization, {"cases": 2, "samples": 100_000}),
}


def run_checks(quick: bool = False, only=None) -> list[CheckResult]:
    """Run every registered check (or those named in ``only``); ``quick`` shrinks case counts."""
    unknown = sorted(set(only or ()) - set(CHECKS))
    if unknown:
        raise ValueError(f"unknown checks: {', '.join(unknown)}")
    results = []
    for name, (fn, quick_kw) in CHECKS.items():
        if only and name not in only:
            continue
        try:
            results.append(fn(**(quick_kw if quick else {})))
        except Exception as exc:  # a crashing check is a failed check, keep reporting the rest
            results.append(CheckResult(name, False, 0, math.inf, 0.0, "error", detail=f"{type(exc).__name__}: {exc}"))
    return results


def report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
