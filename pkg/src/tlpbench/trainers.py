"""Method adapters for run_protocol: linear-probing (TLP, I-GNN) and episodic meta-learners."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .contrast import AugmentSpec, LossSpec
from .episodes import (
    EpisodeSpec,
    gcn_episode_task,
    maml_inner_adapt,
    maml_outer_step,
    protonet_episode,
    sample_episode,
)
from .graphdata import HIDDEN_LABEL, GraphBundle
from .nn import AdamState, Params, adam_step, copy_params, encoder_backward, encoder_forward, init_encoder
from .pretrain import PretrainConfig, PretrainedEncoder, embed_all, pretrain
from .probe import ProbeConfig, fit_probes, probe_predict
from .utils import derive_seed

METHODS = (
    "meta-protonet",
    "meta-maml",
    "ignn",
    "tlp-infonce",
    "tlp-jsd",
    "tlp-supcon",
    "tlp-bootstrap",
    "tlp-joint",
)

_LOSS_FOR_METHOD = {
    "ignn": "CE",
    "tlp-infonce": "InfoNCE",
    "tlp-jsd": "JSD",
    "tlp-supcon": "SupCon",
    "tlp-bootstrap": "Bootstrap",
    "tlp-joint": "Joint",
}


class _ProbePredictor:
    def __init__(self, z: np.ndarray, cfg: ProbeConfig):
        self.z, self.cfg = z, cfg

    def __call__(self, ep):
        return self.batch([ep])[0]

    def batch(self, episodes):
        n_way = episodes[0].n_way
        support = np.stack([self.z[ep.support] for ep in episodes])
        labels = np.stack([ep.support_labels for ep in episodes])
        probes = fit_probes(support, labels, n_way, self.cfg)
        return [probe_predict(p, self.z[ep.query])[0] for p, ep in zip(probes, episodes)]


@dataclass
class TlpTrainer:
    """Pretrain a frozen encoder, then probe each episode's support set."""

    pretrain_cfg: PretrainConfig
    probe_cfg: ProbeConfig = field(default_factory=ProbeConfig)

    def train(self, g, split, seed, max_epochs, hook_every, hook):
        cfg = replace(self.pretrain_cfg, seed=seed, max_epochs=max_epochs)
        if cfg.loss.needs_labels:
            enc = pretrain(g, split, cfg, hook, hook_every)
        else:
            # self-supervised objectives get neither a split nor any label values
            blind = g.with_labels(np.full(g.num_nodes, HIDDEN_LABEL))
            enc = pretrain(blind, None, cfg, hook, hook_every)
        return enc, int(enc.provenance["epochs"])

    def embed(self, snapshot: PretrainedEncoder, g: GraphBundle) -> np.ndarray:
        return embed_all(snapshot, g)

    def predictor(self, snapshot: PretrainedEncoder, g: GraphBundle):
        return _ProbePredictor(self.embed(snapshot, g), self.probe_cfg)


class _ProtoPredictor:
    def __init__(self, z):
        self.z = z

    def __call__(self, ep):
        return protonet_episode(self.z, ep)[2]


@dataclass
class ProtoNetTrainer:
    spec: EpisodeSpec
    lr: float = 1e-3
    weight_decay: float = 1e-4
    dropout_p: float = 0.5
    hidden: int = 16
    out_dim: int = 16

    def train(self, g, split, seed, max_epochs, hook_every, hook):
        params = init_encoder(g.feature_dim, self.hidden, self.out_dim, derive_seed(seed, 0))
        state = AdamState()
        adj, x = g.adjacency, g.compute_features
        epoch = 0
        for epoch in range(1, max_epochs + 1):
            ep = sample_episode(g, split.train, self.spec, derive_seed(seed, 1, epoch))
            z, tape = encoder_forward(params, adj, x, train=True, dropout_p=self.dropout_p, seed=derive_seed(seed, 2, epoch))
            _, grad_z, _ = protonet_episode(z, ep)
            params, state = adam_step(params, encoder_backward(tape, grad_z), state, self.lr, self.weight_decay)
            if epoch % hook_every == 0 and hook(epoch, copy_params(params)):
                break
        return copy_params(params), epoch

    def embed(self, snapshot: Params, g: GraphBundle) -> np.ndarray:
        return encoder_forward(snapshot, g.adjacency, g.compute_features)[0]

    def predictor(self, snapshot: Params, g: GraphBundle):
        return _ProtoPredictor(self.embed(snapshot, g))


@dataclass
class MamlTrainer:
    """First-order MAML on a GCN with a per-episode linear head."""

    spec: EpisodeSpec
    lr: float = 1e-3
    weight_decay: float = 1e-4
    dropout_p: float = 0.5
    hidden: int = 16
    out_dim: int = 16
    inner_steps: int = 20
    inner_lr: float = 0.05

    def train(self, g, split, seed, max_epochs, hook_every, hook):
        params = init_encoder(g.feature_dim, self.hidden, self.out_dim, derive_seed(seed, 0))
        state = AdamState()
        epoch = 0
        for epoch in range(1, max_epochs + 1):
            ep = sample_episode(g, split.train, self.spec, derive_seed(seed, 1, epoch))
            task = gcn_episode_task(
                g, ep, self.out_dim, derive_seed(seed, 3, epoch), train=True,
                dropout_p=self.dropout_p, dropout_seed=derive_seed(seed, 2, epoch),
            )
            params, state = maml_outer_step(params, [task], self.inner_steps, self.inner_lr, state, self.lr, self.weight_decay)
            if epoch % hook_every == 0 and hook(epoch, copy_params(params)):
                break
        return copy_params(params), epoch

    def embed(self, snapshot: Params, g: GraphBundle) -> np.ndarray:
        return encoder_forward(snapshot, g.adjacency, g.compute_features)[0]

    def predictor(self, snapshot: Params, g: GraphBundle) -> Callable:
        def predict(ep):
            task = gcn_episode_task(g, ep, self.out_dim, derive_seed(ep.seed, 3))
            adapted = maml_inner_adapt({**snapshot, **task.head}, task.support_loss, self.inner_steps, self.inner_lr)
            return task.predict(adapted)

        return predict


def make_trainer(
    method: str,
    spec: EpisodeSpec,
    *,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    dropout_p: float = 0.5,
    hidden: int = 16,
    out_dim: int = 16,
    temperature: float = 0.5,
    lam: float = 0.5,
    self_kind: str = "InfoNCE",
    augment: AugmentSpec | None = None,
    ema_decay: float = 0.99,
    inner_steps: int = 20,
    inner_lr: float = 0.05,
    probe: ProbeConfig | None = None,
) -> Any:
    if method == "meta-protonet":
        return ProtoNetTrainer(spec, lr, weight_decay, dropout_p, hidden, out_dim)
    if method == "meta-maml":
        return MamlTrainer(spec, lr, weight_decay, dropout_p, hidden, out_dim, inner_steps, inner_lr)
    if method not in _LOSS_FOR_METHOD:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    loss = LossSpec(kind=_LOSS_FOR_METHOD[method], temperature=temperature, lam=lam, self_kind=self_kind)
    cfg = PretrainConfig(
        loss=loss,
        augment=augment or AugmentSpec(),
        lr=lr,
        weight_decay=weight_decay,
        dropout_p=dropout_p,
        hidden=hidden,
        out_dim=out_dim,
        ema_decay=ema_decay,
    )
    return TlpTrainer(cfg, probe or ProbeConfig())
