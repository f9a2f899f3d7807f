"""Full-batch pretraining loops that produce a frozen encoder for linear probing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from .contrast import (
    AugmentSpec,
    EmaTarget,
    LossSpec,
    ema_update,
    loss_bootstrap,
    loss_info_nce,
    loss_joint,
    loss_jsd,
    loss_supcon,
    nonzero_rows,
    pair_loss_on_valid_rows,
    view_masks,
)
from .graphdata import GraphBundle, LabelSplit, _normalized
from .nn import (
    AdamState,
    Params,
    adam_step,
    encoder_backward,
    encoder_forward,
    init_encoder,
    projection_backward,
    projection_forward,
    softmax_cross_entropy,
    xavier_init,
)
from .utils import derive_seed

log = logging.getLogger(__name__)

StopHook = Callable[[int, "PretrainedEncoder"], bool]

# spawn-key tags for per-epoch random streams
_INIT, _VIEWS, _DROPOUT, _NEG, _HEAD = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class PretrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    dropout_p: float = 0.5
    max_epochs: int = 10000
    seed: int = 0
    hidden: int = 16
    out_dim: int = 16
    ema_decay: float = 0.99

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass(frozen=True, eq=False)
class PretrainedEncoder:
    params: Mapping[str, np.ndarray]
    provenance: Mapping[str, object]

    @classmethod
    def freeze(cls, params: Params, **provenance) -> "PretrainedEncoder":
        frozen = {}
        for k in ("W1", "W2"):
            arr = np.array(params[k], dtype=np.float64, copy=True)
            arr.setflags(write=False)
            frozen[k] = arr
        return cls(MappingProxyType(frozen), MappingProxyType(dict(provenance)))

    @property
    def out_dim(self) -> int:
        return self.params["W2"].shape[1]


def embed_all(enc: PretrainedEncoder, g: GraphBundle) -> np.ndarray:
    """Eval-mode (no dropout) pre-projection embeddings of every node."""
    if g.feature_dim != enc.params["W1"].shape[0]:
        raise ValueError(f"graph has {g.feature_dim} features, encoder expects {enc.params['W1'].shape[0]}")
    z, _ = encoder_forward(dict(enc.params), g.adjacency, g.compute_features)
    return z


def _run_loop(step: Callable[[int], float], snapshot: Callable[[int], PretrainedEncoder],
              max_epochs: int, stop_hook: StopHook | None, hook_every: int) -> tuple[list[float], int]:
    losses = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        losses.append(step(epoch))
        if stop_hook is not None and epoch % hook_every == 0 and stop_hook(epoch, snapshot(epoch)):
            break
    return losses, epoch


def _train_nodes(g: GraphBundle, split: LabelSplit | None) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    classes = split.train if split is not None else g.classes
    nodes = np.flatnonzero(np.isin(g.labels, classes))
    if nodes.size == 0:
        raise ValueError("no labeled nodes in the pretraining classes")
    local = np.searchsorted(np.array(classes), g.labels[nodes])
    return nodes, local, tuple(classes)


def pretrain_ce(
    g: GraphBundle,
    split: LabelSplit | None,
    cfg: PretrainConfig,
    stop_hook: StopHook | None = None,
    hook_every: int = 10,
) -> PretrainedEncoder:
    """Supervised CE over base-class nodes with a temporary linear head (discarded afterwards).

    Only ``split.train`` classes are used when a split is given; otherwise every
    visible (non-hidden) label.
    """
    nodes, targets, classes = _train_nodes(g, split)
    adj, x = g.adjacency, g.compute_features
    params = init_encoder(g.feature_dim, cfg.hidden, cfg.out_dim, derive_seed(cfg.seed, _INIT))
    params["Wh"] = xavier_init(cfg.out_dim, len(classes), derive_seed(cfg.seed, _HEAD))
    state = AdamState()
    history: dict[str, object] = {}

    def step(epoch: int) -> float:
        nonlocal params, state
        z, tape = encoder_forward(
            params, adj, x, train=True, dropout_p=cfg.dropout_p, seed=derive_seed(cfg.seed, _DROPOUT, epoch)
        )
        logits = z[nodes] @ params["Wh"]
        loss, d_logits = softmax_cross_entropy(logits, targets)
        grad_z = np.zeros_like(z)
        grad_z[nodes] = d_logits @ params["Wh"].T
        grads = encoder_backward(tape, grad_z)
        grads["Wh"] = z[nodes].T @ d_logits
        params, state = adam_step(params, grads, state, cfg.lr, cfg.weight_decay)
        history["train_acc"] = float(np.mean(np.argmax(logits, axis=1) == targets))
        return loss

    def snapshot(epoch: int) -> PretrainedEncoder:
        return PretrainedEncoder.freeze(params, loss="CE", seed=cfg.seed, epochs=epoch)

    losses, epochs = _run_loop(step, snapshot, cfg.max_epochs, stop_hook, hook_every)
    enc = PretrainedEncoder.freeze(
        params, loss="CE", seed=cfg.seed, epochs=epochs, lam=None,
        losses=tuple(losses), train_acc=history.get("train_acc"),
    )
    return enc


class _GclModel:
    """Encoder + projection head (+ predictor and EMA target for Bootstrap)."""

    def __init__(self, g: GraphBundle, cfg: PretrainConfig, sup_nodes, sup_labels):
        self.g, self.cfg = g, cfg
        self.kind = cfg.loss.kind
        bootstrap = self.kind == "Bootstrap"
        self.params = init_encoder(
            g.feature_dim, cfg.hidden, cfg.out_dim, derive_seed(cfg.seed, _INIT), projection=True, predictor=bootstrap
        )
        self.target = None
        if bootstrap:
            self.target = EmaTarget({k: self.params[k].copy() for k in ("W1", "W2", "Wp1", "Wp2")}, cfg.ema_decay)
        self.state = AdamState()
        self.sup_nodes, self.sup_labels = sup_nodes, sup_labels
        self.x = g.compute_features

    def _view(self, rng: np.random.Generator):
        keep_edges, cols = view_masks(self.g, self.cfg.augment, rng)
        return _normalized(self.g.num_nodes, self.g.edges[keep_edges]), cols

    def _embed(self, params, view, train: bool, seed: int):
        adj, cols = view
        z, tape = encoder_forward(
            params, adj, self.x, train=train, dropout_p=self.cfg.dropout_p, seed=seed, feature_mask=cols
        )
        p, cache = projection_forward(params, z)
        return p, (tape, cache)

    def _backprop(self, caches, grad_p) -> Params:
        tape, cache = caches
        g_proj, g_z = projection_backward(self.params, cache, grad_p)
        return {**encoder_backward(tape, g_z), **g_proj}

    def _supcon_grads(self, p1, p2) -> tuple[float, dict[str, np.ndarray]]:
        keep = nonzero_rows(p1[self.sup_nodes], p2[self.sup_nodes])
        rows, labels = self.sup_nodes[keep], self.sup_labels[keep]
        k = rows.size
        stacked = np.concatenate([p1[rows], p2[rows]])
        labels = np.concatenate([labels, labels])
        value, g = loss_supcon(stacked, labels, self.cfg.loss.temperature)
        g1, g2 = np.zeros_like(p1), np.zeros_like(p2)
        g1[rows], g2[rows] = g[:k], g[k:]
        return value, {"a": g1, "b": g2}

    def _self_grads(self, kind, p1, p2, epoch) -> tuple[float, dict[str, np.ndarray]]:
        if kind == "InfoNCE":
            value, g1, g2 = pair_loss_on_valid_rows(loss_info_nce, p1, p2, self.cfg.loss.temperature)
        else:
            value, g1, g2 = loss_jsd(p1, p2, derive_seed(self.cfg.seed, _NEG, epoch))
        return value, {"a": g1, "b": g2}

    def step(self, epoch: int) -> float:
        cfg = self.cfg
        rng = np.random.default_rng(derive_seed(cfg.seed, _VIEWS, epoch))
        view_a, view_b = self._view(rng), self._view(rng)
        drop_a = derive_seed(cfg.seed, _DROPOUT, epoch, 0)
        drop_b = derive_seed(cfg.seed, _DROPOUT, epoch, 1)
        if self.kind == "Bootstrap":
            return self._bootstrap_step(view_a, view_b, drop_a, drop_b)
        p1, c1 = self._embed(self.params, view_a, True, drop_a)
        p2, c2 = self._embed(self.params, view_b, True, drop_b)
        if self.kind in ("InfoNCE", "JSD"):
            value, g = self._self_grads(self.kind, p1, p2, epoch)
        elif self.kind == "SupCon":
            value, g = self._supcon_grads(p1, p2)
        else:
            lam = cfg.loss.lam
            self_part = self._self_grads(cfg.loss.self_kind, p1, p2, epoch)
            sup_part = self._supcon_grads(p1, p2) if lam < 1.0 else (0.0, {})
            value, g = loss_joint(self_part, sup_part, lam)
        grads = self._backprop(c1, g["a"])
        for k, v in self._backprop(c2, g["b"]).items():
            grads[k] = grads[k] + v
        self.params, self.state = adam_step(self.params, grads, self.state, cfg.lr, cfg.weight_decay)
        return value

    def _bootstrap_step(self, view_a, view_b, drop_a, drop_b) -> float:
        cfg = self.cfg
        target = self.target.params
        t_a, _ = self._embed(target, view_a, False, 0)
        t_b, _ = self._embed(target, view_b, False, 0)
        grads: Params = {}
        total = 0.0
        for view, drop, tgt in ((view_a, drop_a, t_b), (view_b, drop_b, t_a)):
            h, caches = self._embed(self.params, view, True, drop)
            pred = h @ self.params["Wpred"]
            value, g_pred, _ = pair_loss_on_valid_rows(_bootstrap_pair, pred, tgt)
            total += 0.5 * value
            part = self._backprop(caches, 0.5 * g_pred @ self.params["Wpred"].T)
            part["Wpred"] = h.T @ (0.5 * g_pred)
            for k, v in part.items():
                grads[k] = grads[k] + v if k in grads else v
        self.params, self.state = adam_step(self.params, grads, self.state, cfg.lr, cfg.weight_decay)
        self.target = ema_update(self.target, self.params)
        return total


def _bootstrap_pair(p, t):
    value, g = loss_bootstrap(p, t)
    return value, g, None


def pretrain_gcl(
    g: GraphBundle,
    split: LabelSplit | None,
    cfg: PretrainConfig,
    stop_hook: StopHook | None = None,
    hook_every: int = 10,
) -> PretrainedEncoder:
    """Graph contrastive pretraining on two augmented views per epoch.

    Self-supervised kinds (InfoNCE, JSD, Bootstrap) never touch ``g.labels``;
    SupCon and Joint take positives from ``split.train`` labels only.
    """
    kind = cfg.loss.kind
    if kind == "CE":
        raise ValueError("use pretrain_ce for cross-entropy pretraining")
    sup_nodes = sup_labels = None
    if kind in ("SupCon", "Joint"):
        if split is None:
            raise ValueError(f"{kind} pretraining needs base-class labels (a LabelSplit)")
        sup_nodes, sup_labels, _ = _train_nodes(g, split)
    model = _GclModel(g, cfg, sup_nodes, sup_labels)
    lam = cfg.loss.lam if kind == "Joint" else None

    def snapshot(epoch: int) -> PretrainedEncoder:
        return PretrainedEncoder.freeze(model.params, loss=kind, lam=lam, seed=cfg.seed, epochs=epoch)

    losses, epochs = _run_loop(model.step, snapshot, cfg.max_epochs, stop_hook, hook_every)
    return PretrainedEncoder.freeze(model.params, loss=kind, lam=lam, seed=cfg.seed, epochs=epochs, losses=tuple(losses))


def pretrain(g: GraphBundle, split: LabelSplit | None, cfg: PretrainConfig,
             stop_hook: StopHook | None = None, hook_every: int = 10) -> PretrainedEncoder:
    fn = pretrain_ce if cfg.loss.kind == "CE" else pretrain_gcl
    return fn(g, split, cfg, stop_hook, hook_every)
