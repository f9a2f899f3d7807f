"""Multinomial logistic-regression probe fit on frozen support embeddings.

Fitting is vectorized over a stack of episodes of identical shape; a single
probe is a stack of one. Each episode stops independently once its gradient
norm drops below ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import log_softmax


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-2
    lr: float = 0.5
    max_iters: int = 1000
    tol: float = 1e-6
    standardize: bool = True

    def __post_init__(self):
        if self.l2 < 0 or self.lr < 0 or self.tol < 0 or self.max_iters < 0:
            raise ValueError("probe settings must be non-negative")


@dataclass(frozen=True, eq=False)
class LinearProbe:
    W: np.ndarray  # h x N
    b: np.ndarray  # N
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    @property
    def n_way(self) -> int:
        return self.b.shape[0]

    def transform(self, z: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return z
        return (z - self.mean) / self.scale


def standardization(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and scale over the second-to-last axis; constant dims keep scale 1."""
    mean = z.mean(axis=-2, keepdims=True)
    std = z.std(axis=-2, keepdims=True)
    return mean, np.where(std > 0, std, 1.0)


def probe_objective(params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray, l2: float):
    """Mean CE + (l2/2)||W||^2 and its gradient, for one episode (used by gradient checks)."""
    w, b = params["W"], params["b"]
    logits = x @ w + b
    logp = log_softmax(logits)
    rows = np.arange(x.shape[0])
    value = -logp[rows, y].mean() + 0.5 * l2 * np.sum(w * w)
    d = np.exp(logp)
    d[rows, y] -= 1.0
    d /= x.shape[0]
    return float(value), {"W": x.T @ d + l2 * w, "b": d.sum(axis=0)}


def _step_bound(x: np.ndarray, l2: float) -> np.ndarray:
    """Per-episode Lipschitz bound of the objective's gradient.

    The softmax-CE Hessian is bounded by 1/2 * (x~^T x~ / S) with x~ = [x, 1].
    """
    s = x.shape[-2]
    aug = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    gram = np.swapaxes(aug, -1, -2) @ aug / s
    return 0.5 * np.linalg.eigvalsh(gram)[..., -1] + l2


def fit_probes(support_z: np.ndarray, support_y: np.ndarray, n_way: int, cfg: ProbeConfig) -> list[LinearProbe]:
    """Fit one probe per episode; ``support_z`` is (B, S, h), ``support_y`` (B, S)."""
    z = np.asarray(support_z, dtype=np.float64)
    y = np.asarray(support_y, dtype=np.int64)
    batch, s, h = z.shape
    for row in y:
        if np.bincount(row, minlength=n_way)[:n_way].min() == 0 or row.max() >= n_way:
            raise ValueError("every class 0..N-1 needs at least one support sample")
    if cfg.standardize:
        mean, scale = standardization(z)
        x = (z - mean) / scale
    else:
        mean = scale = None
        x = z
    onehot = np.zeros((batch, s, n_way))
    np.put_along_axis(onehot, y[..., None], 1.0, axis=-1)
    eta = np.minimum(cfg.lr, 1.0 / _step_bound(x, cfg.l2))[:, None, None]
    w = np.zeros((batch, h, n_way))
    b = np.zeros((batch, 1, n_way))
    # compacted working set of episodes that have not converged yet
    idx = np.arange(batch)
    xs, xts, ys, etas = x, np.swapaxes(x, -1, -2), onehot, eta
    ws, bs = w.copy(), b.copy()
    for _ in range(cfg.max_iters):
        logits = xs @ ws + bs
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        d = (p - ys) / s
        g_w = xts @ d + cfg.l2 * ws
        g_b = d.sum(axis=-2, keepdims=True)
        norm = np.sqrt(np.sum(g_w * g_w, axis=(1, 2)) + np.sum(g_b * g_b, axis=(1, 2)))
        done = norm < cfg.tol
        if done.any():
            w[idx[done]], b[idx[done]] = ws[done], bs[done]
            keep = ~done
            idx, xs, xts, ys, etas = idx[keep], xs[keep], xts[keep], ys[keep], etas[keep]
            ws, bs, g_w, g_b = ws[keep], bs[keep], g_w[keep], g_b[keep]
            if idx.size == 0:
                break
        ws = ws - etas * g_w
        bs = bs - etas * g_b
    w[idx], b[idx] = ws, bs
    probes = []
    for i in range(batch):
        probes.append(
            LinearProbe(
                W=w[i],
                b=b[i, 0],
                mean=None if mean is None else mean[i, 0],
                scale=None if scale is None else scale[i, 0],
            )
        )
    return probes


def fit_probe(support_z: np.ndarray, support_y: np.ndarray, cfg: ProbeConfig = ProbeConfig(), seed: int = 0) -> LinearProbe:
    """Zero-initialized full-batch gradient descent; ``seed`` is accepted for interface symmetry
    (the fit is deterministic)."""
    support_y = np.asarray(support_y, dtype=np.int64)
    n_way = int(support_y.max()) + 1
    return fit_probes(np.asarray(support_z)[None], support_y[None], n_way, cfg)[0]


def probe_predict(probe: LinearProbe, query_z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    query_z = np.asarray(query_z, dtype=np.float64)
    if query_z.ndim != 2 or query_z.shape[1] != probe.W.shape[0]:
        raise ValueError(f"query dim {query_z.shape} does not match probe input {probe.W.shape[0]}")
    logits = probe.transform(query_z) @ probe.W + probe.b
    probs = np.exp(log_softmax(logits))
    return np.argmax(logits, axis=1), probs
