"""Boltzmann policy over discrete actions.

The head emits one energy per action and an inverse temperature ``beta``;
action ``i`` is drawn with probability ``exp(-beta * e_i) / sum_k exp(-beta * e_k)``.
All functions operate on the last axis and broadcast over leading batch axes.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class InvalidExperience(ValueError):
    """The behavior policy gave zero probability to the recorded action."""


class BoltzmannParams(NamedTuple):
    energies: np.ndarray  # (..., n_actions)
    inv_temp: np.ndarray  # (...)


class DiscreteGrad(NamedTuple):
    d_energies: np.ndarray
    d_inv_temp: np.ndarray


def probs(p: BoltzmannParams) -> np.ndarray:
    e = np.asarray(p.energies, dtype=float)
    beta = np.asarray(p.inv_temp, dtype=float)[..., None]
    logits = -beta * e
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def log_probs(p: BoltzmannParams) -> np.ndarray:
    e = np.asarray(p.energies, dtype=float)
    beta = np.asarray(p.inv_temp, dtype=float)[..., None]
    logits = -beta * e
    logits = logits - logits.max(axis=-1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


def greedy(p: BoltzmannParams) -> np.ndarray:
    """Most probable action; np.argmax already breaks ties towards the lowest index."""
    return np.argmax(probs(p), axis=-1)


def sample(p: BoltzmannParams, rng: np.random.Generator) -> np.ndarray:
    pr = probs(p)
    u = rng.random(pr.shape[:-1])[..., None]
    idx = (np.cumsum(pr, axis=-1) < u).sum(axis=-1)
    return np.minimum(idx, pr.shape[-1] - 1)


def kl_discrete(p, q):
    """Categorical KL(p || q); +inf where q_i = 0 < p_i."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pos = p > 0
    with np.errstate(divide="ignore"):
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(q)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def kl_grad_discrete(p, q_params: BoltzmannParams) -> DiscreteGrad:
    """Gradient of ``kl_discrete(p, probs(q_params))`` with respect to q_params.

    With q_i = softmax(-beta e)_i the chain rule gives
    d/de_j = beta (p_j - q_j) and d/dbeta = <e>_p - <e>_q.
    """
    p = np.asarray(p, dtype=float)
    q = probs(q_params)
    e = np.asarray(q_params.energies, dtype=float)
    beta = np.asarray(q_params.inv_temp, dtype=float)[..., None]
    d_e = beta * (p - q)
    d_beta = (p * e).sum(axis=-1) - (q * e).sum(axis=-1)
    return DiscreteGrad(d_e, d_beta)


def _behavior_prob(action_index, behavior):
    behavior = np.asarray(behavior, dtype=float)
    a = np.asarray(action_index)
    if np.any(a < 0) or np.any(a >= behavior.shape[-1]):
        raise IndexError(f"action index out of range for {behavior.shape[-1]} actions")
    mu = np.take_along_axis(behavior, a[..., None], axis=-1)[..., 0]
    if np.any(mu <= 0):
        raise InvalidExperience("behavior probability of the recorded action is zero")
    return a, mu


def iw_discrete(action_index, q_params: BoltzmannParams, behavior):
    """pi_current(a) / pi_behavior(a)."""
    a, mu = _behavior_prob(action_index, behavior)
    q = probs(q_params)
    out = np.take_along_axis(q, a[..., None], axis=-1)[..., 0] / mu
    return float(out) if np.ndim(out) == 0 else out


def iw_grad_discrete(action_index, q_params: BoltzmannParams, behavior) -> DiscreteGrad:
    """Gradient of :func:`iw_discrete` through the softmax Jacobian."""
    a, mu = _behavior_prob(action_index, behavior)
    q = probs(q_params)
    e = np.asarray(q_params.energies, dtype=float)
    beta = np.asarray(q_params.inv_temp, dtype=float)
    rho = np.take_along_axis(q, a[..., None], axis=-1)[..., 0] / mu
    onehot = np.zeros_like(q)
    np.put_along_axis(onehot, a[..., None], 1.0, axis=-1)
    # d log q_a / d e_j = beta (q_j - 1{j=a});  d log q_a / d beta = <e>_q - e_a
    dlog_e = beta[..., None] * (q - onehot)
    e_a = np.take_along_axis(e, a[..., None], axis=-1)[..., 0]
    dlog_beta = (q * e).sum(axis=-1) - e_a
    return DiscreteGrad(rho[..., None] * dlog_e, rho * dlog_beta)
