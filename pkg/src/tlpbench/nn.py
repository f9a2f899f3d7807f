"""Two-layer GCN encoder with hand-derived gradients, Adam, and gradient checking.

Parameters are plain ``dict[str, ndarray]`` so optimizers, EMA targets,
checkpoints and finite-difference checks can treat every model uniformly.
Layer names: ``W1`` (d x hidden), ``W2`` (hidden x out), optional projection
head ``Wp1``/``Wp2`` (out x out) and bootstrap predictor ``Wpred``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .utils import atomic_write_bytes

Params = dict[str, np.ndarray]
EncoderParams = Params

FSNP_MAGIC = b"FSNP"
FSNP_VERSION = 1


def xavier_init(fan_in: int, fan_out: int, seed: int) -> np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ValueError("xavier_init needs positive dimensions")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_encoder(
    in_dim: int,
    hidden: int = 16,
    out_dim: int = 16,
    seed: int = 0,
    projection: bool = False,
    predictor: bool = False,
) -> Params:
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(5)]
    params = {"W1": xavier_init(in_dim, hidden, seeds[0]), "W2": xavier_init(hidden, out_dim, seeds[1])}
    if projection:
        params["Wp1"] = xavier_init(out_dim, out_dim, seeds[2])
        params["Wp2"] = xavier_init(out_dim, out_dim, seeds[3])
    if predictor:
        params["Wpred"] = xavier_init(out_dim, out_dim, seeds[4])
    return params


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_grads(a: Params, b: Params) -> Params:
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + v if k in out else v
    return out


# ---------------------------------------------------------------------------
# Encoder


@dataclass
class ForwardTape:
    adj: sp.spmatrix
    x: object  # dense ndarray or CSR
    feature_mask: np.ndarray | None
    w2: np.ndarray
    pre1: np.ndarray
    drop: np.ndarray | None  # scaled inverted-dropout mask, None in eval mode
    agg2: np.ndarray  # adj @ dropped hidden


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout mask: kept units are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout_p={p} outside [0, 1)")
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def encoder_forward(
    params: Params,
    adj: sp.spmatrix,
    x,
    train: bool = False,
    dropout_p: float = 0.0,
    seed: int | np.random.Generator | None = None,
    feature_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardTape]:
    """Z = A relu(A X W1) W2, with dropout on the hidden layer in train mode.

    ``feature_mask`` (length d, 0/1) zeroes feature columns without copying X.
    """
    w1, w2 = params["W1"], params["W2"]
    n = adj.shape[0]
    if x.shape[0] != n or x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ValueError(f"shape mismatch: adj {adj.shape}, X {x.shape}, W1 {w1.shape}, W2 {w2.shape}")
    w1_eff = w1 if feature_mask is None else w1 * feature_mask[:, None]
    pre1 = np.asarray(adj @ np.asarray(x @ w1_eff))
    h1 = np.maximum(pre1, 0.0)
    drop = None
    if train and dropout_p > 0.0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        drop = dropout_mask(h1.shape, dropout_p, rng)
        h1 = h1 * drop
    agg2 = np.asarray(adj @ h1)
    z = agg2 @ w2
    return z, ForwardTape(adj, x, feature_mask, w2, pre1, drop, agg2)


def encoder_backward(tape: ForwardTape, grad_z: np.ndarray) -> Params:
    if grad_z.shape != (tape.agg2.shape[0], tape.w2.shape[1]):
        raise ValueError(f"grad shape {grad_z.shape} does not match tape")
    g_w2 = tape.agg2.T @ grad_z
    g_h1 = np.asarray(tape.adj.T @ (grad_z @ tape.w2.T))
    if tape.drop is not None:
        g_h1 = g_h1 * tape.drop
    g_pre1 = g_h1 * (tape.pre1 > 0)
    g_xw = np.asarray(tape.adj.T @ g_pre1)
    g_w1 = np.asarray(tape.x.T @ g_xw)
    if tape.feature_mask is not None:
        g_w1 = g_w1 * tape.feature_mask[:, None]
    return {"W1": g_w1, "W2": g_w2}


# ---------------------------------------------------------------------------
# Projection head and small layers


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def projection_forward(params: Params, z: np.ndarray):
    pre = z @ params["Wp1"]
    hid = elu(pre)
    return hid @ params["Wp2"], (z, pre, hid)


def projection_backward(params: Params, cache, grad_out: np.ndarray) -> tuple[Params, np.ndarray]:
    z, pre, hid = cache
    g_wp2 = hid.T @ grad_out
    g_hid = grad_out @ params["Wp2"].T
    g_pre = g_hid * np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0)))
    g_wp1 = z.T @ g_pre
    return {"Wp1": g_wp1, "Wp2": g_wp2}, g_pre @ params["Wp1"].T


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, targets].mean()
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return float(loss), grad / logits.shape[0]


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Params, grads: Params, state: AdamState, lr: float, weight_decay: float = 0.0
) -> tuple[Params, AdamState]:
    """One bias-corrected Adam step; weight decay is added to the gradient (L2 on the loss)."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# Gradient checking


def numerical_gradient(f: Callable[[Params], float], params: Params, eps: float = 1e-5) -> Params:
    out = {}
    for name, value in params.items():
        grad = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus, minus = copy_params(params), copy_params(params)
            plus[name][idx] += eps
            minus[name][idx] -= eps
            grad[idx] = (f(plus) - f(minus)) / (2 * eps)
        out[name] = grad
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8))


def finite_diff_check(
    loss_fn: Callable[[Params], tuple[float, Params]], params: Params, eps: float = 1e-5
) -> float:
    """Relative error between analytic and central-difference gradients.

    The error is measured on all checked tensors flattened into one vector, so a
    tensor whose true gradient is ~0 (a dead ReLU unit) cannot inflate it with
    finite-difference rounding noise. ``loss_fn`` returns ``(value, grads)``;
    only tensors present in ``grads`` are checked.
    """
    _, analytic = loss_fn(params)
    checked = {k: params[k] for k in analytic}

    def value(p: Params) -> float:
        return float(loss_fn({**params, **p})[0])

    numeric = numerical_gradient(value, checked, eps)
    flat = lambda g: np.concatenate([np.ravel(g[k]) for k in analytic])
    return relative_error(flat(analytic), flat(numeric))


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_bytes(params: Params) -> bytes:
    parts = [FSNP_MAGIC, struct.pack("<II", FSNP_VERSION, len(params))]
    for value in params.values():
        arr = np.ascontiguousarray(value, dtype="<f8")
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, params: Params) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path: str | Path, names: list[str] | None = None) -> Params:
    raw = Path(path).read_bytes()
    if raw[:4] != FSNP_MAGIC:
        raise ValueError(f"{path}: not an FSNP checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FSNP_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    names = names or ["W1", "W2", "Wp1", "Wp2", "Wpred"][:count]
    if len(names) != count:
        raise ValueError(f"{path}: {count} layers but {len(names)} names")
    off = 12
    params = {}
    for name in names:
        (ndim,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
    return params
