"""Graph views and contrastive objectives, each returning exact gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphdata import GraphBundle
from .nn import Params

LOSS_KINDS = ("CE", "InfoNCE", "JSD", "SupCon", "Bootstrap", "Joint")
SELF_KINDS = ("InfoNCE", "JSD")


@dataclass(frozen=True)
class AugmentSpec:
    edge_drop_p: float = 0.3
    feature_mask_p: float = 0.3

    def __post_init__(self):
        for name in ("edge_drop_p", "feature_mask_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "InfoNCE"
    temperature: float = 0.5
    lam: float = 1.0
    self_kind: str = "InfoNCE"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda={self.lam} outside [0, 1]")
        if self.self_kind not in SELF_KINDS:
            raise ValueError(f"self_kind must be one of {SELF_KINDS}")

    @property
    def needs_labels(self) -> bool:
        return self.kind in ("CE", "SupCon", "Joint")


def view_masks(g: GraphBundle, spec: AugmentSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample (kept-edge boolean mask over g.edges, 0/1 feature-column mask)."""
    keep_edges = rng.random(g.num_edges) >= spec.edge_drop_p
    keep_cols = (rng.random(g.feature_dim) >= spec.feature_mask_p).astype(np.float64)
    return keep_edges, keep_cols


def augment_view(g: GraphBundle, spec: AugmentSpec, seed: int) -> GraphBundle:
    keep_edges, keep_cols = view_masks(g, spec, np.random.default_rng(seed))
    return GraphBundle(
        features=g.features * keep_cols,
        edges=g.edges[keep_edges],
        labels=g.labels,
        split=g.split,
        name=g.name,
    )


# ---------------------------------------------------------------------------
# helpers


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding row")
    return x / norms, norms


def _unit_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=1, keepdims=True)) / norms


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# losses


def _nce_anchor_side(s_cross: np.ndarray, s_self: np.ndarray):
    """Per-anchor GRACE terms for anchors on the row side of ``s_cross``.

    Returns per-anchor losses and the softmax weights over the cross and
    intra-view similarities (intra-view diagonal excluded).
    """
    s_self = s_self.copy()
    np.fill_diagonal(s_self, -np.inf)
    top = np.maximum(s_cross.max(axis=1), s_self.max(axis=1))[:, None]
    e_cross = np.exp(s_cross - top)
    e_self = np.exp(s_self - top)
    denom = e_cross.sum(axis=1, keepdims=True) + e_self.sum(axis=1, keepdims=True)
    losses = -np.diag(s_cross) + top[:, 0] + np.log(denom[:, 0])
    return losses, e_cross / denom, e_self / denom


# cosine/tau lies in [-1/tau, 1/tau], so shifting every exponent by 1/tau cannot
# overflow and cannot underflow a whole row while 2/tau stays below this bound
_FIXED_SHIFT_LIMIT = 600.0


def _nce_fixed_shift(uh, vh, s_uv, s_uu, s_vv, tau):
    """Both anchor sides at once using one shared shift; returns unit-row grads and the loss."""
    n = uh.shape[0]
    c = 1.0 / tau
    e_uv = np.exp(s_uv - c)
    e_uu = np.exp(s_uu - c)
    e_vv = np.exp(s_vv - c)
    np.fill_diagonal(e_uu, 0.0)
    np.fill_diagonal(e_vv, 0.0)
    r_u = 1.0 / (e_uv.sum(axis=1) + e_uu.sum(axis=1))
    r_v = 1.0 / (e_uv.sum(axis=0) + e_vv.sum(axis=1))
    loss = (-2.0 * np.trace(s_uv) + 2 * n * c - np.log(r_u).sum() - np.log(r_v).sum()) / (2 * n)
    # intra-view weights are symmetric, so P + P^T collapses to e * (r_i + r_j)
    g_uv = e_uv * (r_u[:, None] + r_v[None, :])
    g_uv[np.diag_indices(n)] -= 2.0
    g_uu = e_uu * (r_u[:, None] + r_u[None, :])
    g_vv = e_vv * (r_v[:, None] + r_v[None, :])
    scale = 1.0 / (2 * n * tau)
    g_uh = (g_uv @ vh + g_uu @ uh) * scale
    g_vh = (g_uv.T @ uh + g_vv @ vh) * scale
    return g_uh, g_vh, loss


def loss_info_nce(u: np.ndarray, v: np.ndarray, tau: float = 0.5) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric GRACE InfoNCE with inter- and intra-view negatives (cosine / tau)."""
    if u.shape != v.shape:
        raise ValueError("views must be row-aligned with equal shapes")
    n = u.shape[0]
    uh, un = _unit_rows(u)
    vh, vn = _unit_rows(v)
    s_uv = uh @ vh.T / tau
    s_uu = uh @ uh.T / tau
    s_vv = vh @ vh.T / tau
    if 2.0 / tau < _FIXED_SHIFT_LIMIT:
        g_uh, g_vh, loss = _nce_fixed_shift(uh, vh, s_uv, s_uu, s_vv, tau)
        return float(loss), _unit_rows_backward(uh, un, g_uh), _unit_rows_backward(vh, vn, g_vh)
    loss_u, p_uv, p_uu = _nce_anchor_side(s_uv, s_uu)
    loss_v, p_vu, p_vv = _nce_anchor_side(s_uv.T, s_vv)
    loss = (loss_u.sum() + loss_v.sum()) / (2 * n)

    eye = np.eye(n)
    g_uv = ((p_uv - eye) + (p_vu - eye).T) / (2 * n)
    g_uu = p_uu / (2 * n)
    g_vv = p_vv / (2 * n)
    g_uh = (g_uv @ vh + (g_uu + g_uu.T) @ uh) / tau
    g_vh = (g_uv.T @ uh + (g_vv + g_vv.T) @ vh) / tau
    return float(loss), _unit_rows_backward(uh, un, g_uh), _unit_rows_backward(vh, vn, g_vh)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("derangement needs n >= 2")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def loss_jsd(u: np.ndarray, v: np.ndarray, neg_seed: int) -> tuple[float, np.ndarray, np.ndarray]:
    """JSD estimator: aligned pairs are positives, a seeded derangement gives negatives."""
    n = u.shape[0]
    if n < 2:
        raise ValueError("loss_jsd needs n >= 2 (no derangement exists)")
    perm = derangement(n, np.random.default_rng(neg_seed))
    pos = np.sum(u * v, axis=1)
    neg = np.sum(u * v[perm], axis=1)
    loss = _softplus(-pos).mean() + _softplus(neg).mean()
    d_pos = (_sigmoid(pos) - 1.0) / n
    d_neg = _sigmoid(neg) / n
    g_u = d_pos[:, None] * v + d_neg[:, None] * v[perm]
    g_v = d_pos[:, None] * u
    np.add.at(g_v, perm, d_neg[:, None] * u)
    return float(loss), g_u, g_v


def loss_supcon(z: np.ndarray, labels: np.ndarray, tau: float = 0.5) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss over cosine similarities; anchors without positives are skipped."""
    n = z.shape[0]
    if n < 2:
        raise ValueError("loss_supcon needs n >= 2")
    labels = np.asarray(labels)
    zh, zn = _unit_rows(z)
    s = zh @ zh.T / tau
    eye = np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise ValueError("no anchor has a positive (all labels unique)")
    masked = np.where(eye, -np.inf, s)
    top = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - top)
    denom = e.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(denom[:, 0])
    safe_pos = np.maximum(n_pos, 1)
    mean_pos = np.where(pos, s, 0.0).sum(axis=1) / safe_pos
    per_anchor = lse - mean_pos
    count = anchors.sum()
    loss = per_anchor[anchors].sum() / count

    g_s = (e / denom - pos / safe_pos[:, None]) * anchors[:, None] / count
    g_zh = (g_s + g_s.T) @ zh / tau
    return float(loss), _unit_rows_backward(zh, zn, g_zh)


def loss_bootstrap(p: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    """mean_i (2 - 2 cos(p_i, t_i)); targets are constants."""
    if p.shape != t.shape:
        raise ValueError("predictions and targets must be row-aligned")
    ph, pn = _unit_rows(p)
    th, _ = _unit_rows(t)
    cos = np.sum(ph * th, axis=1)
    n = p.shape[0]
    loss = np.mean(2.0 - 2.0 * cos)
    return float(loss), _unit_rows_backward(ph, pn, -2.0 * th / n)


def nonzero_rows(*mats: np.ndarray) -> np.ndarray:
    """Rows that are non-zero in every matrix (cosine losses are undefined elsewhere)."""
    keep = np.ones(mats[0].shape[0], dtype=bool)
    for m in mats:
        keep &= np.any(m != 0, axis=1)
    return keep


def pair_loss_on_valid_rows(loss_fn, u: np.ndarray, v: np.ndarray, *args):
    """Evaluate a row-aligned two-view loss on rows where both views are non-zero.

    Excluded rows receive zero gradient.
    """
    keep = nonzero_rows(u, v)
    if keep.all():
        return loss_fn(u, v, *args)
    full_u, full_v = np.zeros_like(u), np.zeros_like(v)
    if not keep.any():
        return 0.0, full_u, full_v
    value, gu, gv = loss_fn(u[keep], v[keep], *args)
    full_u[keep], full_v[keep] = gu, gv
    return value, full_u, full_v


# ---------------------------------------------------------------------------
# bootstrap target and joint mixing


@dataclass
class EmaTarget:
    params: Params
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay={self.decay} outside [0, 1]")


def ema_update(target: EmaTarget, online: Params) -> EmaTarget:
    new = {}
    for name, value in target.params.items():
        if name not in online or online[name].shape != value.shape:
            raise ValueError(f"online parameters do not mirror target layer {name}")
        new[name] = target.decay * value + (1.0 - target.decay) * online[name]
    return EmaTarget(new, target.decay)


def loss_joint(
    self_loss: tuple[float, dict[str, np.ndarray]],
    sup_loss: tuple[float, dict[str, np.ndarray]],
    lam: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """lam * self + (1 - lam) * sup for values and every gradient entry."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    (v_self, g_self), (v_sup, g_sup) = self_loss, sup_loss
    if lam == 1.0:
        return v_self, dict(g_self)
    if lam == 0.0:
        return v_sup, dict(g_sup)
    if set(g_self) != set(g_sup):
        raise ValueError("self and supervised gradients cover different tensors")
    grads = {k: lam * g_self[k] + (1.0 - lam) * g_sup[k] for k in g_self}
    return lam * v_self + (1.0 - lam) * v_sup, grads
