"""N-way K-shot episodes and the episodic baselines (ProtoNet, first-order MAML)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .graphdata import GraphBundle
from .nn import (
    AdamState,
    Params,
    adam_step,
    encoder_backward,
    encoder_forward,
    softmax_cross_entropy,
    xavier_init,
)

LossFn = Callable[[Params], tuple[float, Params]]


class EpisodeError(ValueError):
    """The class pool cannot support the requested episode shape."""


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    m_query: int = 10

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.m_query < 1:
            raise ValueError(f"invalid episode spec N={self.n_way} K={self.k_shot} M={self.m_query}")


@dataclass(frozen=True, eq=False)
class Episode:
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    class_map: tuple[int, ...]
    seed: int = 0

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    def same_as(self, other: "Episode") -> bool:
        return (
            self.class_map == other.class_map
            and np.array_equal(self.support, other.support)
            and np.array_equal(self.query, other.query)
            and np.array_equal(self.support_labels, other.support_labels)
            and np.array_equal(self.query_labels, other.query_labels)
        )


def sample_episode(g: GraphBundle, class_pool: Iterable[int], spec: EpisodeSpec, seed: int) -> Episode:
    pool = np.array(sorted(set(int(c) for c in class_pool)), dtype=np.int64)
    if pool.size < spec.n_way:
        raise EpisodeError(f"class pool of size {pool.size} cannot form a {spec.n_way}-way episode")
    rng = np.random.default_rng(seed)
    classes = rng.choice(pool, size=spec.n_way, replace=False)
    per_class = spec.k_shot + spec.m_query
    support, query = [], []
    for c in classes:
        members = g.nodes_of_class(int(c))
        if members.size < per_class:
            raise EpisodeError(
                f"insufficient nodes: class {c} has {members.size}, episode needs K+M={per_class}"
            )
        picked = rng.choice(members, size=per_class, replace=False)
        support.append(picked[: spec.k_shot])
        query.append(picked[spec.k_shot :])
    local = np.arange(spec.n_way)
    return Episode(
        support=np.concatenate(support),
        support_labels=np.repeat(local, spec.k_shot),
        query=np.concatenate(query),
        query_labels=np.repeat(local, spec.m_query),
        class_map=tuple(int(c) for c in classes),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# ProtoNet


def prototypes(z: np.ndarray, ep: Episode) -> np.ndarray:
    protos = np.zeros((ep.n_way, z.shape[1]))
    np.add.at(protos, ep.support_labels, z[ep.support])
    counts = np.bincount(ep.support_labels, minlength=ep.n_way)
    return protos / counts[:, None]


def protonet_episode(z: np.ndarray, ep: Episode) -> tuple[float, np.ndarray, np.ndarray]:
    """Squared-Euclidean prototype classifier: (query CE, dL/dZ, query predictions)."""
    needed = max(ep.support.max(), ep.query.max())
    if needed >= z.shape[0]:
        raise IndexError(f"embedding matrix has {z.shape[0]} rows, episode needs node {needed}")
    protos = prototypes(z, ep)
    zq = z[ep.query]
    diff = zq[:, None, :] - protos[None, :, :]  # q x N x h
    logits = -np.sum(diff * diff, axis=2)
    loss, d_logits = softmax_cross_entropy(logits, ep.query_labels)
    grad = np.zeros_like(z)
    weighted = d_logits[:, :, None] * diff
    np.add.at(grad, ep.query, -2.0 * weighted.sum(axis=1))
    d_protos = 2.0 * weighted.sum(axis=0)
    counts = np.bincount(ep.support_labels, minlength=ep.n_way)
    np.add.at(grad, ep.support, d_protos[ep.support_labels] / counts[ep.support_labels, None])
    return loss, grad, np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# first-order MAML


@dataclass
class EpisodeTask:
    """Support/query losses of one episode plus its freshly initialized head."""

    support_loss: LossFn
    query_loss: LossFn
    head: Params
    predict: Callable[[Params], np.ndarray] | None = None


def maml_inner_adapt(params: Params, support_loss: LossFn, steps: int, inner_lr: float) -> Params:
    """Plain gradient descent on the support loss; the input dict is left untouched."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    adapted = {k: v.copy() for k, v in params.items()}
    for _ in range(steps):
        _, grads = support_loss(adapted)
        adapted = {k: v - inner_lr * grads[k] if k in grads else v for k, v in adapted.items()}
    return adapted


def fomaml_gradients(params: Params, tasks: Sequence[EpisodeTask], steps: int, inner_lr: float) -> Params:
    """Mean over tasks of the query gradient at the adapted parameters, restricted to ``params``."""
    if not tasks:
        raise ValueError("empty meta-batch")
    total = {k: np.zeros_like(v) for k, v in params.items()}
    for task in tasks:
        adapted = maml_inner_adapt({**params, **task.head}, task.support_loss, steps, inner_lr)
        _, grads = task.query_loss(adapted)
        for k in total:
            if k in grads:
                total[k] += grads[k]
    return {k: v / len(tasks) for k, v in total.items()}


def maml_outer_step(
    params: Params,
    tasks: Sequence[EpisodeTask],
    steps: int,
    inner_lr: float,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> tuple[Params, AdamState]:
    grads = fomaml_gradients(params, tasks, steps, inner_lr)
    return adam_step(params, grads, state, lr, weight_decay)


def gcn_episode_task(
    g: GraphBundle,
    ep: Episode,
    out_dim: int,
    head_seed: int,
    train: bool = False,
    dropout_p: float = 0.0,
    dropout_seed: int = 0,
) -> EpisodeTask:
    """GCN encoder + linear head (``Wh``, out_dim x N) losses for one episode.

    The dropout mask is fixed per task so the support loss is a deterministic
    function of the parameters.
    """
    adj, x = g.adjacency, g.compute_features

    def rows_loss(params: Params, rows: np.ndarray, targets: np.ndarray) -> tuple[float, Params]:
        z, tape = encoder_forward(params, adj, x, train=train, dropout_p=dropout_p, seed=dropout_seed)
        logits = z[rows] @ params["Wh"]
        loss, d_logits = softmax_cross_entropy(logits, targets)
        grad_z = np.zeros_like(z)
        np.add.at(grad_z, rows, d_logits @ params["Wh"].T)
        grads = encoder_backward(tape, grad_z)
        grads["Wh"] = z[rows].T @ d_logits
        return loss, grads

    def predict(params: Params) -> np.ndarray:
        z, _ = encoder_forward(params, adj, x)
        return np.argmax(z[ep.query] @ params["Wh"], axis=1)

    def support_loss(params: Params) -> tuple[float, Params]:
        return rows_loss(params, ep.support, ep.support_labels)

    def query_loss(params: Params) -> tuple[float, Params]:
        return rows_loss(params, ep.query, ep.query_labels)

    head = {"Wh": xavier_init(out_dim, ep.n_way, head_seed)}
    return EpisodeTask(support_loss, query_loss, head, predict)

