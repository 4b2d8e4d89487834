"""Learning rules of multi-agent V-RACER with Remember-and-Forget Experience Replay.

Conventions used throughout:

* ``g`` (policy gradient) is an *ascent* direction on the expected advantage.
* Everything handed to Adam is a *descent* direction, so the blended policy
  update is ``beta * (-g) + (1 - beta) * g_kl`` for near-policy samples and
  ``(1 - beta) * g_kl`` for far-policy ones.
* Batched arrays are shaped ``(B, N, ...)``: minibatch of joint tuples, agents.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import boltzmann as bz
from . import clipped_normal as cn

SIGMA_FLOOR = 1e-4
BETA_FLOOR = 1e-4


class Scalarization(str, enum.Enum):
    INDIVIDUAL = "individual"
    COOPERATIVE = "cooperative"


class DynamicsModel(str, enum.Enum):
    LOCAL = "local"
    FULL = "full"


VARIANTS = {
    "LDI": (DynamicsModel.LOCAL, Scalarization.INDIVIDUAL),
    "LDCo": (DynamicsModel.LOCAL, Scalarization.COOPERATIVE),
    "FDI": (DynamicsModel.FULL, Scalarization.INDIVIDUAL),
    "FDCo": (DynamicsModel.FULL, Scalarization.COOPERATIVE),
}


def parse_variant(name: str) -> tuple[DynamicsModel, Scalarization]:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None


# ---------------------------------------------------------------------------
# scalarization and importance weights
# ---------------------------------------------------------------------------

def scalarize(r, i: int, s: Scalarization) -> float:
    r = np.asarray(r, dtype=float)
    if not 0 <= i < r.shape[-1]:
        raise IndexError(f"agent index {i} out of range for {r.shape[-1]} agents")
    if s is Scalarization.INDIVIDUAL:
        return float(r[i])
    return float(np.mean(r))


def scalarize_agents(x, s: Scalarization) -> np.ndarray:
    """Apply the scalarization along the last (agent) axis, keeping its shape.

    Used for both rewards and state values: the cooperative mode replaces
    every agent's entry by the mean over agents.
    """
    x = np.asarray(x, dtype=float)
    if s is Scalarization.INDIVIDUAL:
        return x
    return np.broadcast_to(x.mean(axis=-1, keepdims=True), x.shape).copy()


def joint_iw(per_agent_rhos, d: DynamicsModel, i: int) -> float:
    rhos = np.asarray(per_agent_rhos, dtype=float)
    if d is DynamicsModel.LOCAL:
        return float(rhos[i])
    return float(np.prod(rhos))


def leave_one_out_prod(x: np.ndarray) -> np.ndarray:
    """prod_{j != i} x_j along the last axis, without dividing."""
    x = np.asarray(x, dtype=float)
    ones = np.ones(x.shape[:-1] + (1,))
    left = np.cumprod(np.concatenate([ones, x[..., :-1]], axis=-1), axis=-1)
    right = np.cumprod(np.concatenate([ones, x[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return left * right


def joint_iw_agents(rhos, d: DynamicsModel) -> np.ndarray:
    """Per-agent importance weight under the dynamics model, shape preserved."""
    rhos = np.asarray(rhos, dtype=float)
    if d is DynamicsModel.LOCAL:
        return rhos
    return np.broadcast_to(np.prod(rhos, axis=-1, keepdims=True), rhos.shape).copy()


def classify(rho, c_max: float):
    """Near-policy test 1/c_max < rho < c_max (strict on both sides)."""
    rho = np.asarray(rho, dtype=float)
    out = (rho > 1.0 / c_max) & (rho < c_max)
    return bool(out) if out.ndim == 0 else out


def qret(r_scalar, vtbc_next, gamma: float):
    return r_scalar + gamma * vtbc_next


# ---------------------------------------------------------------------------
# per-sample gradient pieces
# ---------------------------------------------------------------------------

def value_grad(v_pred: float, vtbc_target: float, d_v_net: np.ndarray) -> np.ndarray:
    return (v_pred - vtbc_target) * np.asarray(d_v_net)


def policy_grad(advantage: float, iw_grad_net: np.ndarray) -> np.ndarray:
    """Ascent direction advantage * grad(rho)."""
    return advantage * np.asarray(iw_grad_net)


def refer_blend(g: np.ndarray, g_kl: np.ndarray, beta: float, on_policy: bool) -> np.ndarray:
    if on_policy:
        return beta * -np.asarray(g) + (1.0 - beta) * np.asarray(g_kl)
    return (1.0 - beta) * np.asarray(g_kl)


@dataclass(frozen=True)
class ReFERState:
    beta: float = 0.3
    c_max: float = 4.0
    f_star: float = 0.1
    eta_beta: float = 1e-4


def update_beta(st: ReFERState, f_off: float) -> ReFERState:
    if f_off > st.f_star:
        beta = (1.0 - st.eta_beta) * st.beta
    else:
        beta = (1.0 - st.eta_beta) * st.beta + st.eta_beta
    return replace(st, beta=min(1.0, max(0.0, beta)))


@dataclass
class GradientBundle:
    policy_grad: np.ndarray
    value_grad: np.ndarray
    kl_grad: np.ndarray
    on_policy: np.ndarray


# ---------------------------------------------------------------------------
# policy heads: map raw network outputs to distribution parameters and chain
# distribution-level gradients back to the raw outputs
# ---------------------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


class ContinuousHead:
    """Independent clipped normals per action dimension.

    Raw layout: ``[mu_1..mu_k, s_1..s_k]`` with ``sigma = softplus(s) + 1e-4``.
    Stored behavior parameters: ``[mu_1..mu_k, sigma_1..sigma_k]``.
    """

    discrete = False

    def __init__(self, action_dim: int, bounds: cn.Bounds = cn.Bounds(-1.0, 1.0)):
        self.k = int(action_dim)
        self.bounds = bounds
        self.raw_dim = 2 * self.k
        self.param_dim = 2 * self.k

    def params(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        return np.concatenate([raw[..., :self.k], softplus(raw[..., self.k:]) + SIGMA_FLOOR], axis=-1)

    def _split(self, par):
        return cn.GaussParams(par[..., :self.k], par[..., self.k:])

    def sample(self, par: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(cn.sample(self._split(par), self.bounds, rng))

    def greedy(self, par: np.ndarray) -> np.ndarray:
        return np.clip(par[..., :self.k], self.bounds.lo, self.bounds.hi)

    def iw(self, actions, cur_par, beh_par) -> np.ndarray:
        per_dim = np.asarray(cn.iw(actions, self._split(cur_par), self._split(beh_par), self.bounds))
        return np.prod(per_dim, axis=-1)

    def iw_grad_raw(self, actions, raw, beh_par):
        """(rho, d rho / d raw)."""
        cur = self.params(raw)
        q, p = self._split(cur), self._split(beh_par)
        per_dim = np.asarray(cn.iw(actions, q, p, self.bounds))
        g = cn.iw_grad(actions, q, p, self.bounds)
        others = leave_one_out_prod(per_dim)
        d_mu = others * np.asarray(g.d_mu)
        d_s = others * np.asarray(g.d_sigma) * sigmoid(np.asarray(raw)[..., self.k:])
        return np.prod(per_dim, axis=-1), np.concatenate([d_mu, d_s], axis=-1)

    def kl(self, beh_par, cur_par) -> np.ndarray:
        return np.sum(np.asarray(cn.kl(self._split(beh_par), self._split(cur_par), self.bounds)), axis=-1)

    def kl_grad_raw(self, beh_par, raw):
        """d KL(behavior || current) / d raw, summed over independent dimensions."""
        g = cn.kl_grad(self._split(beh_par), self._split(self.params(raw)), self.bounds)
        d_s = np.asarray(g.d_sigma) * sigmoid(np.asarray(raw)[..., self.k:])
        return np.concatenate([np.asarray(g.d_mu), d_s], axis=-1)


class DiscreteHead:
    """Boltzmann head.

    Raw layout: ``[e_1..e_n, b]`` with ``inv_temp = softplus(b) + 1e-4``.
    Stored behavior parameters: ``[e_1..e_n, inv_temp]``.
    """

    discrete = True

    def __init__(self, n_actions: int):
        if n_actions < 2:
            raise ValueError("need at least two actions")
        self.n = int(n_actions)
        self.raw_dim = self.n + 1
        self.param_dim = self.n + 1

    def params(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        return np.concatenate([raw[..., :self.n], softplus(raw[..., self.n:]) + BETA_FLOOR], axis=-1)

    def _split(self, par):
        return bz.BoltzmannParams(par[..., :self.n], par[..., self.n])

    def probs(self, par):
        return bz.probs(self._split(par))

    def sample(self, par, rng):
        return bz.sample(self._split(par), rng)

    def greedy(self, par):
        return bz.greedy(self._split(par))

    def iw(self, actions, cur_par, beh_par) -> np.ndarray:
        return np.asarray(bz.iw_discrete(np.asarray(actions, dtype=np.int64), self._split(cur_par), self.probs(beh_par)))

    def iw_grad_raw(self, actions, raw, beh_par):
        q = self._split(self.params(raw))
        a = np.asarray(actions, dtype=np.int64)
        beh = self.probs(beh_par)
        rho = np.asarray(bz.iw_discrete(a, q, beh))
        g = bz.iw_grad_discrete(a, q, beh)
        d_b = np.asarray(g.d_inv_temp) * sigmoid(np.asarray(raw)[..., self.n])
        return rho, np.concatenate([g.d_energies, d_b[..., None]], axis=-1)

    def kl(self, beh_par, cur_par) -> np.ndarray:
        return np.asarray(bz.kl_discrete(self.probs(beh_par), self.probs(cur_par)))

    def kl_grad_raw(self, beh_par, raw):
        g = bz.kl_grad_discrete(self.probs(beh_par), self._split(self.params(raw)))
        d_b = np.asarray(g.d_inv_temp) * sigmoid(np.asarray(raw)[..., self.n])
        return np.concatenate([g.d_energies, d_b[..., None]], axis=-1)


def kl_reg_grad(head, behavior, current_raw, head_jacobian: np.ndarray) -> np.ndarray:
    """Chain d KL(behavior || current) / d raw through a raw-output Jacobian (P_raw x n_params)."""
    return head.kl_grad_raw(np.asarray(behavior), np.asarray(current_raw)) @ head_jacobian


# ---------------------------------------------------------------------------
# minibatch update (the body of trainPolicy)
# ---------------------------------------------------------------------------

@dataclass
class HeadGrads:
    """Output-level gradients of one minibatch, already averaged over B*N.

    ``d_value`` (B, N) and ``d_pg``/``d_kl`` (B, N, raw_dim) are descent
    directions with respect to the network outputs; ``d_pg`` is the negated
    advantage-weighted policy gradient before the beta blend.
    """

    d_value: np.ndarray
    d_pg: np.ndarray
    d_kl: np.ndarray
    rho: np.ndarray
    on_policy: np.ndarray
    advantage: np.ndarray
    kl: np.ndarray

    def policy_out(self, beta: float) -> np.ndarray:
        mask = self.on_policy[..., None]
        return np.where(mask, beta * self.d_pg + (1.0 - beta) * self.d_kl, (1.0 - beta) * self.d_kl)


def importance_weights(head, actions, cur_par, beh_par, dynamics: DynamicsModel):
    """(per-agent local ratios, ratios under the dynamics model), both (B, N)."""
    local = head.iw(actions, cur_par, beh_par)
    return local, joint_iw_agents(local, dynamics)


def head_gradients(
    head,
    values: np.ndarray,
    raw: np.ndarray,
    actions: np.ndarray,
    behavior: np.ndarray,
    rewards: np.ndarray,
    vtbc: np.ndarray,
    vtbc_next: np.ndarray,
    gamma: float,
    c_max: float,
    dynamics: DynamicsModel,
    scalar: Scalarization,
) -> HeadGrads:
    """Output-level gradients for a minibatch of joint tuples.

    ``values`` (B, N) and ``raw`` (B, N, raw_dim) come from the current
    network; ``vtbc``/``vtbc_next`` are the refreshed targets at t and t+1.
    """
    B, N = values.shape
    scale = 1.0 / (B * N)

    v_f = scalarize_agents(values, scalar)
    r_f = scalarize_agents(rewards, scalar)
    residual = v_f - vtbc
    if scalar is Scalarization.INDIVIDUAL:
        d_value = residual * scale
    else:
        # V_f is the agent mean: d/dV_j of 0.5 * sum_i (V_f - target_i)^2 is the mean residual
        d_value = np.broadcast_to(residual.mean(axis=-1, keepdims=True), residual.shape) * scale

    advantage = qret(r_f, vtbc_next, gamma) - v_f

    local, d_local = head.iw_grad_raw(actions, raw, behavior)
    if dynamics is DynamicsModel.LOCAL:
        rho = local
        coeff = advantage
    else:
        rho = joint_iw_agents(local, dynamics)
        # d/d omega of prod_j rho_j * sum_i A_i: agent j's head carries
        # (prod_{k != j} rho_k) * sum_i A_i
        coeff = leave_one_out_prod(local) * advantage.sum(axis=-1, keepdims=True)
    on = classify(rho, c_max)
    d_pg = -(coeff[..., None] * d_local) * scale
    d_kl = head.kl_grad_raw(behavior, raw) * scale
    kl_val = head.kl(behavior, head.params(raw))
    return HeadGrads(d_value, d_pg, d_kl, rho, np.asarray(on), advantage, kl_val)
