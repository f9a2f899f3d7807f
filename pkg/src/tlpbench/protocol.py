"""Unified few-shot evaluation: validation-driven early stopping, test tasks, accuracy and CI."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .clustering import clustering_scores
from .episodes import Episode, EpisodeSpec, sample_episode
from .graphdata import GraphBundle, LabelSplit
from .utils import derive_seed

log = logging.getLogger(__name__)

PredictFn = Callable[[Episode], np.ndarray]

# spawn-key tags for per-repeat streams
TRAIN, DEV, TEST, CLUSTER = 0, 1, 2, 3
# episodes handed to a batch predictor at once; fixed so results never depend on worker count
CHUNK = 50


@dataclass(frozen=True)
class ProtocolConfig:
    val_interval: int = 10  # V
    tasks: int = 100  # I
    patience: int = 10  # P
    max_epochs: int = 10000  # E
    repeats: int = 5  # R
    spec: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(2, 5, 10))
    seed: int = 0
    pooled_ci: bool = False
    resample_validation: bool = False

    def __post_init__(self):
        for name in ("val_interval", "tasks", "patience", "max_epochs", "repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class Trainer(Protocol):
    """What run_protocol needs from a method.

    ``train`` runs until ``max_epochs`` or until ``hook(epoch, snapshot)``
    returns True (called every ``hook_every`` epochs) and returns the final
    snapshot with the number of epochs run.
    """

    def train(self, g: GraphBundle, split: LabelSplit, seed: int, max_epochs: int,
              hook_every: int, hook: Callable[[int, Any], bool]) -> tuple[Any, int]: ...

    def predictor(self, snapshot: Any, g: GraphBundle) -> PredictFn: ...

    def embed(self, snapshot: Any, g: GraphBundle) -> np.ndarray: ...


@dataclass
class RunResult:
    method: str
    dataset: str
    N: int
    K: int
    M: int
    seeds: list[int]
    per_repeat_acc: list[float]
    mean_acc: float
    ci95: float
    nmi: float | None = None
    ari: float | None = None
    epochs: list[int] = field(default_factory=list)
    task_acc: list[list[float]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("task_acc")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def confidence_interval(scores: Sequence[float]) -> float:
    """1.96 * sample std / sqrt(R); 0 for a single score."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("confidence_interval of an empty list")
    if scores.size == 1:
        return 0.0
    return float(1.96 * scores.std(ddof=1) / math.sqrt(scores.size))


def task_seeds(seed_base: int, count: int, *keys: int) -> list[int]:
    return [derive_seed(seed_base, *keys, i) for i in range(count)]


def episode_accuracies(
    predict_fn: PredictFn,
    g: GraphBundle,
    class_pool: Sequence[int],
    spec: EpisodeSpec,
    seeds: Sequence[int],
    threads: int = 1,
) -> list[float]:
    """Per-task query accuracy, in seed order.

    Episodes are grouped in fixed chunks of CHUNK; predictors exposing a
    ``batch`` method receive a whole chunk. Worker count only changes scheduling.
    """
    episodes = [sample_episode(g, class_pool, spec, s) for s in seeds]
    chunks = [episodes[i : i + CHUNK] for i in range(0, len(episodes), CHUNK)]
    batch = getattr(predict_fn, "batch", None)

    def run(chunk: list[Episode]) -> list[float]:
        preds = batch(chunk) if batch is not None else [predict_fn(ep) for ep in chunk]
        return [float(np.mean(np.asarray(p) == ep.query_labels)) for p, ep in zip(preds, chunk)]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [a for part in parts for a in part]


def evaluate_meta_tasks(
    predict_fn: PredictFn,
    g: GraphBundle,
    class_pool: Sequence[int],
    spec: EpisodeSpec,
    num_tasks: int,
    seed_base: int,
    threads: int = 1,
) -> float:
    accs = episode_accuracies(predict_fn, g, class_pool, spec, task_seeds(seed_base, num_tasks), threads)
    return float(np.mean(accs))


class EarlyStopper:
    """Patience counter over validation scores; strict improvement resets it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = 0.0
        self.bad = 0
        self.history: list[float] = []

    def update(self, score: float) -> bool:
        """Record a score; True when it improved on the best so far."""
        self.history.append(score)
        if score > self.best:
            self.best, self.bad = score, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


@dataclass
class TrainedRepeat:
    snapshot: Any
    epochs: int
    best_epoch: int | None
    validation: list[float]


def train_repeat(
    trainer: Trainer,
    g: GraphBundle,
    split: LabelSplit,
    cfg: ProtocolConfig,
    repeat: int,
    threads: int = 1,
) -> TrainedRepeat:
    """Train one repeat with validation early stopping; returns the best-validation snapshot.

    The trainer only sees labels of ``split.train`` classes.
    """
    view = g.with_visible_classes(split.train)
    stopper = EarlyStopper(cfg.patience)
    dev_seeds = task_seeds(cfg.seed, cfg.tasks, repeat, DEV)
    best: dict[str, Any] = {}

    def hook(epoch: int, snapshot: Any) -> bool:
        nonlocal dev_seeds
        if cfg.resample_validation:
            dev_seeds = task_seeds(cfg.seed, cfg.tasks, repeat, DEV, epoch)
        score = float(np.mean(episode_accuracies(
            trainer.predictor(snapshot, view), g, split.dev, cfg.spec, dev_seeds, threads)))
        if stopper.update(score):
            best["snapshot"], best["epoch"] = snapshot, epoch
        log.debug("repeat %d epoch %d: validation accuracy %.4f (best %.4f)", repeat, epoch, score, stopper.best)
        return stopper.should_stop

    final, ran = trainer.train(view, split, derive_seed(cfg.seed, repeat, TRAIN), cfg.max_epochs, cfg.val_interval, hook)
    return TrainedRepeat(best.get("snapshot", final), int(ran), best.get("epoch"), stopper.history)


def run_protocol(
    trainer: Trainer,
    g: GraphBundle,
    split: LabelSplit,
    cfg: ProtocolConfig,
    method: str = "",
    threads: int = 1,
    cluster: bool = False,
) -> RunResult:
    spec = cfg.spec
    accs, epochs, seeds, per_task = [], [], [], []
    nmis, aris = [], []
    view = g.with_visible_classes(split.train)
    for r in range(cfg.repeats):
        seeds.append(derive_seed(cfg.seed, r, TRAIN))
        trained = train_repeat(trainer, g, split, cfg, r, threads)
        test = episode_accuracies(
            trainer.predictor(trained.snapshot, view), g, split.test, spec,
            task_seeds(cfg.seed, cfg.tasks, r, TEST), threads,
        )
        per_task.append(test)
        accs.append(float(np.mean(test)))
        epochs.append(trained.epochs)
        log.info("repeat %d: test accuracy %.4f after %d epochs", r, accs[-1], trained.epochs)
        if cluster:
            nodes = np.flatnonzero(np.isin(g.labels, split.test))
            z = trainer.embed(trained.snapshot, view)[nodes]
            score_nmi, score_ari = clustering_scores(z, g.labels[nodes], len(split.test), derive_seed(cfg.seed, r, CLUSTER))
            nmis.append(score_nmi)
            aris.append(score_ari)

    if cfg.pooled_ci:
        pooled = [a for run in per_task for a in run]
        ci = confidence_interval(pooled)
    else:
        ci = confidence_interval(accs)
    return RunResult(
        method=method,
        dataset=g.name,
        N=spec.n_way,
        K=spec.k_shot,
        M=spec.m_query,
        seeds=seeds,
        per_repeat_acc=accs,
        mean_acc=float(np.mean(accs)),
        ci95=ci,
        nmi=float(np.mean(nmis)) if nmis else None,
        ari=float(np.mean(aris)) if aris else None,
        epochs=epochs,
        task_acc=per_task,
    )


def with_spec(cfg: ProtocolConfig, n_way: int, k_shot: int) -> ProtocolConfig:
    return replace(cfg, spec=EpisodeSpec(n_way, k_shot, cfg.spec.m_query))
