"""K-Means and partition-agreement metrics (NMI, ARI) for embedding quality."""

from __future__ import annotations

import numpy as np


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, np.ndarray, float]:
    k = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        counts = np.bincount(new, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            # re-seed at the point farthest from its current centroid
            far = int(np.argmax(d[np.arange(x.shape[0]), new]))
            new[far] = empty
            d[far] = 0.0
            counts = np.bincount(new, minlength=k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(np.sum((x - centers[labels]) ** 2))
    return labels, centers, inertia


def kmeans(x: np.ndarray, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, float]:
    """Best-inertia Lloyd run over ``n_init`` k-means++ seedings."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1 or x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        if best is None or run[2] < best[2]:
            best = run
    return best


def _contingency(a, b) -> np.ndarray:
    _, ai = np.unique(np.asarray(a), return_inverse=True)
    _, bi = np.unique(np.asarray(b), return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(a, b) -> float:
    """Normalized mutual information with arithmetic-mean normalization."""
    table = _contingency(a, b)
    n = table.sum()
    row, col = table.sum(axis=1), table.sum(axis=0)
    h_a, h_b = _entropy(row), _entropy(col)
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    nz = table > 0
    outer = np.outer(row, col)
    mi = float(np.sum(table[nz] / n * np.log(n * table[nz] / outer[nz])))
    return mi / (0.5 * (h_a + h_b))


def _pairs(x: np.ndarray) -> float:
    x = x.astype(np.float64)
    return float(np.sum(x * (x - 1) / 2))


def ari(a, b) -> float:
    """Adjusted Rand index from pair counts."""
    table = _contingency(a, b)
    n = table.sum()
    index = _pairs(table.ravel())
    sum_a, sum_b = _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))
    total = n * (n - 1) / 2
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)


def clustering_scores(z: np.ndarray, labels, k: int, seed: int = 0) -> tuple[float, float]:
    if k < 2:
        raise ValueError("clustering needs k >= 2")
    if np.asarray(z).shape[0] < k:
        raise ValueError(f"fewer points ({np.asarray(z).shape[0]}) than clusters ({k})")
    pred, _, _ = kmeans(z, k, seed)
    return nmi(labels, pred), ari(labels, pred)
