"""Feed-forward approximator with a shared tanh trunk and a linear output layer.

Output column 0 is the state value, the remaining columns are the raw
policy-head outputs.  Parameters live in one flat float64 vector (layer-major,
weights then bias) and the per-layer matrices are views into it, so Adam and
checkpoints operate on the flat vector directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HEAD_SCALE = 0.1


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class NetLayout:
    input_dim: int
    hidden_widths: tuple[int, ...] = (128, 128)
    value_out: int = 1
    policy_out: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        dims = (self.input_dim, self.value_out, self.policy_out, *self.hidden_widths)
        if any(int(d) < 1 for d in dims):
            raise LayoutError(f"all layout dimensions must be >= 1: {self}")
        if self.value_out != 1:
            raise LayoutError("value_out must be 1")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.value_out + self.policy_out]

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))


@dataclass
class NetworkParams:
    layout: NetLayout
    flat: np.ndarray
    weights: list[np.ndarray] = field(init=False, repr=False)
    biases: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.layout.n_params,):
            raise LayoutError(f"expected {self.layout.n_params} parameters, got {self.flat.shape}")
        self.weights, self.biases = _views(self.layout, self.flat)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.layout, self.flat.copy())


def _views(layout: NetLayout, flat: np.ndarray):
    sizes = layout.sizes
    ws, bs, off = [], [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        ws.append(flat[off:off + n_in * n_out].reshape(n_in, n_out))
        off += n_in * n_out
        bs.append(flat[off:off + n_out])
        off += n_out
    return ws, bs


def init(layout: NetLayout, seed: int) -> NetworkParams:
    """LeCun-uniform weights (limit sqrt(3 / fan_in)), zero biases, output layer scaled by 0.1."""
    rng = np.random.default_rng(seed)
    params = NetworkParams(layout, np.zeros(layout.n_params))
    last = len(params.weights) - 1
    for i, w in enumerate(params.weights):
        limit = np.sqrt(3.0 / w.shape[0])
        w[...] = rng.uniform(-limit, limit, size=w.shape)
        if i == last:
            w *= HEAD_SCALE
    return params


@dataclass
class ForwardCache:
    inputs: np.ndarray
    activations: list[np.ndarray]


def forward_batch(params: NetworkParams, states: np.ndarray, keep_cache: bool = False):
    """Forward a (B, input_dim) batch.  Returns (values (B,), policy_raw (B, P)[, cache])."""
    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layout.input_dim:
        raise LayoutError(f"expected states of shape (B, {params.layout.input_dim}), got {x.shape}")
    acts = []
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    out = h @ params.weights[-1] + params.biases[-1]
    if keep_cache:
        return out[:, 0], out[:, 1:], ForwardCache(x, acts)
    return out[:, 0], out[:, 1:]


def forward(params: NetworkParams, state: np.ndarray):
    """Single-state forward pass: (value, policy_raw)."""
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 1:
        raise LayoutError("forward expects a single state vector; use forward_batch")
    v, pol = forward_batch(params, state[None, :])
    return float(v[0]), pol[0]


def backward_batch(params: NetworkParams, states, d_value, d_policy, cache: ForwardCache | None = None):
    """Gradient of sum_b (d_value[b] * V_b + <d_policy[b], policy_raw_b>) w.r.t. the flat parameters."""
    if cache is None:
        _, _, cache = forward_batch(params, states, keep_cache=True)
    d_value = np.asarray(d_value, dtype=np.float64).reshape(-1)
    d_policy = np.asarray(d_policy, dtype=np.float64)
    n = cache.inputs.shape[0]
    if d_value.shape != (n,) or d_policy.shape != (n, params.layout.policy_out):
        raise LayoutError("output gradient shapes do not match the batch/layout")
    grad = np.empty_like(params.flat)
    gws, gbs = _views(params.layout, grad)

    delta = np.concatenate([d_value[:, None], d_policy], axis=1)
    layer_inputs = [cache.inputs, *cache.activations]
    for li in range(len(params.weights) - 1, -1, -1):
        gws[li][...] = layer_inputs[li].T @ delta
        gbs[li][...] = delta.sum(axis=0)
        if li > 0:
            delta = (delta @ params.weights[li].T) * (1.0 - layer_inputs[li] ** 2)
    return grad


def backward(params: NetworkParams, state, out_grads):
    """Single-state reverse pass; ``out_grads`` is (d_value, d_policy_raw)."""
    d_v, d_pol = out_grads
    state = np.asarray(state, dtype=np.float64)
    return backward_batch(params, state[None, :], [d_v], np.asarray(d_pol, dtype=float)[None, :])


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rejected: int = 0

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params: NetworkParams, opt: AdamState, grad: np.ndarray) -> bool:
    """Bias-corrected Adam descent step, in place.  Returns False if the gradient was rejected."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise LayoutError("gradient length does not match parameters")
    if not np.all(np.isfinite(grad)):
        opt.rejected += 1
        logger.warning("adam_step: non-finite gradient rejected (%d so far)", opt.rejected)
        return False
    opt.t += 1
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * grad
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * grad * grad
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.t)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.t)
    params.flat -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return True


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def net_state_dict(params: NetworkParams, opt: AdamState, prefix: str = "net_") -> dict:
    lay = params.layout
    return {
        f"{prefix}version": np.array(CHECKPOINT_VERSION),
        f"{prefix}input_dim": np.array(lay.input_dim),
        f"{prefix}hidden_widths": np.array(lay.hidden_widths, dtype=np.int64),
        f"{prefix}policy_out": np.array(lay.policy_out),
        f"{prefix}flat": params.flat,
        f"{prefix}adam_m": opt.m,
        f"{prefix}adam_v": opt.v,
        f"{prefix}adam_scalars": np.array([opt.lr, opt.beta1, opt.beta2, opt.eps]),
        f"{prefix}adam_t": np.array([opt.t, opt.rejected], dtype=np.int64),
    }


def net_from_state_dict(d, prefix: str = "net_"):
    version = int(d[f"{prefix}version"])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    layout = NetLayout(
        int(d[f"{prefix}input_dim"]),
        tuple(int(h) for h in d[f"{prefix}hidden_widths"]),
        1,
        int(d[f"{prefix}policy_out"]),
    )
    params = NetworkParams(layout, np.array(d[f"{prefix}flat"]))
    lr, b1, b2, eps = (float(x) for x in d[f"{prefix}adam_scalars"])
    t, rejected = (int(x) for x in d[f"{prefix}adam_t"])
    opt = AdamState(np.array(d[f"{prefix}adam_m"]), np.array(d[f"{prefix}adam_v"]), t, lr, b1, b2, eps, rejected)
    return params, opt


def save_checkpoint(path: str | Path, params: NetworkParams, opt: AdamState) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **net_state_dict(params, opt))


def load_checkpoint(path: str | Path):
    with np.load(path) as d:
        return net_from_state_dict(d)
