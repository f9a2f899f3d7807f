"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import SCHEMA, ConfigError, RunConfig, parse_config
from .contrast import AugmentSpec
from .episodes import EpisodeError, EpisodeSpec
from .graphdata import (
    BundleError,
    GraphBundle,
    LabelSplit,
    SbmSpec,
    fsnb_bytes,
    generate_sbm,
    load_bundle,
    split_label_space,
    write_bundle,
)
from .gradcheck import TOLERANCE, run_suite
from .nn import checkpoint_bytes, encoder_forward, load_checkpoint
from .probe import ProbeConfig
from .protocol import ProtocolConfig, RunResult, run_protocol, train_repeat
from .trainers import make_trainer
from .utils import atomic_write_bytes, atomic_write_text, derive_seed

log = logging.getLogger("tlpbench")

COMMANDS = ("generate", "pretrain", "evaluate", "sweep-lambda", "cluster-eval", "export-embeddings", "gradcheck")

# (train, dev, test) class counts; classes are assigned in sorted id order
DEFAULT_CLASS_SPLITS = {"cora": (3, 2, 2), "citeseer": (2, 2, 2)}
LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
_DATA_TAG = 9

_ALIASES = {"n_way": ["--n"], "k_shot": ["--k"], "m_query": ["--m"]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# argument parsing


def _common_options() -> argparse.ArgumentParser:
    parent = _Parser(add_help=False, allow_abbrev=False)
    parent.add_argument("--config", help="INI config file with [data] [protocol] [train] [probe] [sbm] sections")
    parent.add_argument("--out", help="output directory")
    parent.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    group = parent.add_argument_group("configuration overrides (any config key)")
    for name, key in SCHEMA.items():
        flags = [f"--{name.replace('_', '-')}"] + _ALIASES.get(name, [])
        group.add_argument(*flags, dest=name, default=None, metavar=key.kind.__name__.upper(),
                           help=f"[{key.section}] default {key.default}")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _common_options()
    parser = _Parser(prog="tlpbench", description="Few-shot node classification benchmark", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    helps = {
        "generate": "write a synthetic SBM graph bundle to --out",
        "pretrain": "train one encoder with validation early stopping; write a checkpoint to --out",
        "evaluate": "run the full protocol; RunResult JSON on stdout",
        "sweep-lambda": "joint-loss protocol runs over lambda = 0.0 .. 1.0 with doubled patience",
        "cluster-eval": "protocol run plus K-Means NMI/ARI on novel-class embeddings",
        "export-embeddings": "write node embeddings (FSNB binary and CSV) to --out",
        "gradcheck": "finite-difference check of every hand-derived gradient",
    }
    subs = {}
    for name in COMMANDS:
        subs[name] = sub.add_parser(name, parents=[parent], help=helps[name], allow_abbrev=False)
    subs["export-embeddings"].add_argument("--checkpoint", help="FSNP checkpoint to embed with instead of training")
    subs["gradcheck"].add_argument("--draws", type=int, default=100, help="random instances per case")
    return parser


# ---------------------------------------------------------------------------
# building blocks


def protocol_config(cfg: RunConfig) -> ProtocolConfig:
    return ProtocolConfig(
        val_interval=cfg["val_interval"],
        tasks=cfg["tasks"],
        patience=cfg["patience"],
        max_epochs=cfg["max_epochs"],
        repeats=cfg["repeats"],
        spec=EpisodeSpec(cfg["n_way"], cfg["k_shot"], cfg["m_query"]),
        seed=cfg["seed"],
        pooled_ci=cfg["pooled_ci"],
        resample_validation=cfg["resample_validation"],
    )


def build_trainer(cfg: RunConfig, method: str | None = None, lam: float | None = None) -> Any:
    return make_trainer(
        method or cfg["method"],
        EpisodeSpec(cfg["n_way"], cfg["k_shot"], cfg["m_query"]),
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        dropout_p=cfg["dropout"],
        hidden=cfg["hidden"],
        out_dim=cfg["out_dim"],
        temperature=cfg["temperature"],
        lam=cfg["lambda"] if lam is None else lam,
        self_kind=cfg["self_kind"],
        augment=AugmentSpec(edge_drop_p=cfg["edge_drop"], feature_mask_p=cfg["feature_mask"]),
        ema_decay=cfg["ema_decay"],
        inner_steps=cfg["inner_steps"],
        inner_lr=cfg["inner_lr"],
        probe=ProbeConfig(
            l2=cfg["probe_l2"], lr=cfg["probe_lr"], max_iters=cfg["probe_iters"],
            tol=cfg["probe_tol"], standardize=cfg["standardize"],
        ),
    )


def sbm_bundle(cfg: RunConfig) -> GraphBundle:
    spec = SbmSpec(
        classes=cfg["sbm_classes"],
        nodes_per_class=cfg["nodes_per_class"],
        p_in=cfg["p_in"],
        p_out=cfg["p_out"],
        feature_dim=cfg["feature_dim"],
        class_mean_separation=cfg["separation"],
        noise_std=cfg["noise_std"],
    )
    a, b = cfg["train_classes"], cfg["train_classes"] + cfg["dev_classes"]
    ids = tuple(range(cfg["sbm_classes"]))
    split = LabelSplit(train=ids[:a], dev=ids[a:b], test=ids[b:])
    return generate_sbm(spec, derive_seed(cfg["seed"], _DATA_TAG), split=split, name="sbm")


def load_dataset(cfg: RunConfig) -> tuple[GraphBundle, LabelSplit]:
    """``sbm`` generates a graph; anything else is a bundle directory (direct path or under data_root)."""
    name = cfg["dataset"]
    if name == "sbm":
        g = sbm_bundle(cfg)
        return g, g.split
    path = Path(name)
    if not path.is_dir():
        path = Path(cfg["data_root"]) / name
    if not path.is_dir():
        raise BundleError(f"dataset {name!r} not found (looked for {name} and {path})")
    g = load_bundle(path)
    if g.split is not None:
        return g, g.split
    counts = DEFAULT_CLASS_SPLITS.get(path.name.lower())
    if counts is None:
        raise BundleError(f"{path}: no splits.json and no default class split for {path.name!r}")
    classes = g.classes
    if len(classes) != sum(counts):
        raise BundleError(f"{path}: expected {sum(counts)} classes for the default split, found {len(classes)}")
    a, b = counts[0], counts[0] + counts[1]
    split = split_label_space(g, {"train": classes[:a], "dev": classes[a:b], "test": classes[b:]})
    return g, split


def check_pools(g: GraphBundle, split: LabelSplit, spec: EpisodeSpec, meta: bool) -> None:
    """Fail before training when an episode could never be sampled."""
    pools = {"dev": split.dev, "test": split.test}
    if meta:
        pools["train"] = split.train
    need = spec.k_shot + spec.m_query
    for phase, pool in pools.items():
        if len(pool) < spec.n_way:
            raise EpisodeError(f"{phase} classes {list(pool)} cannot form a {spec.n_way}-way episode")
        for c in pool:
            size = g.nodes_of_class(c).size
            if size < need:
                raise EpisodeError(f"insufficient nodes: {phase} class {c} has {size}, episode needs K+M={need}")


def _prepare(cfg: RunConfig, method: str | None = None):
    g, split = load_dataset(cfg)
    pcfg = protocol_config(cfg)
    check_pools(g, split, pcfg.spec, (method or cfg["method"]).startswith("meta-"))
    return g, split, pcfg


def _encoder_params(snapshot: Any) -> dict[str, np.ndarray]:
    params = getattr(snapshot, "params", snapshot)
    return {"W1": np.asarray(params["W1"]), "W2": np.asarray(params["W2"])}


def summary_csv(results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "dataset", "N", "K", "M", "repeats", "mean_acc", "ci95"])
    for r in results:
        writer.writerow([r.method, r.dataset, r.N, r.K, r.M, len(r.per_repeat_acc), repr(r.mean_acc), repr(r.ci95)])
    return buf.getvalue()


def embeddings_csv(z: np.ndarray) -> str:
    """One row per node: its id, then the float32 embedding values."""
    buf = io.StringIO()
    header = ",".join(["node"] + [f"z{j}" for j in range(z.shape[1])])
    table = np.column_stack([np.arange(z.shape[0]), z.astype(np.float32)])
    np.savetxt(buf, table, delimiter=",", fmt=["%d"] + ["%.9g"] * z.shape[1], header=header, comments="")
    return buf.getvalue()


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out DIR")
    return Path(args.out)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _require_out(args)
    g = sbm_bundle(cfg)
    write_bundle(g, out)
    print(json.dumps({"path": str(out), "nodes": g.num_nodes, "edges": g.num_edges, "split": g.split.as_dict()}))
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = _require_out(args)
    g, split, pcfg = _prepare(cfg)
    trained = train_repeat(build_trainer(cfg), g, split, pcfg, repeat=0, threads=cfg["threads"])
    params = _encoder_params(trained.snapshot)
    atomic_write_bytes(out / "encoder.fsnp", checkpoint_bytes(params))
    meta = {
        "layers": list(params),
        "method": cfg["method"],
        "dataset": g.name,
        "seed": cfg["seed"],
        "epochs": trained.epochs,
        "best_epoch": trained.best_epoch,
        "validation": trained.validation,
    }
    atomic_write_text(out / "encoder.json", json.dumps(meta, indent=2) + "\n")
    print(json.dumps(meta, indent=2))
    return 0


def _emit(results: list[RunResult], args, single: bool, name: str) -> None:
    text = results[0].to_json() if single else json.dumps([r.to_dict() for r in results], indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / f"{name}.json", text + "\n")
        atomic_write_text(out / "summary.csv", summary_csv(results))


def cmd_evaluate(cfg: RunConfig, args, cluster: bool = False) -> int:
    g, split, pcfg = _prepare(cfg)
    result = run_protocol(build_trainer(cfg), g, split, pcfg, method=cfg["method"], threads=cfg["threads"], cluster=cluster)
    _emit([result], args, True, "clusters" if cluster else "result")
    return 0


def cmd_sweep_lambda(cfg: RunConfig, args) -> int:
    g, split, pcfg = _prepare(cfg, "tlp-joint")
    # the joint loss trains less smoothly, so patience is doubled
    pcfg = replace(pcfg, patience=2 * pcfg.patience)
    results = []
    for lam in LAMBDA_GRID:
        log.info("lambda = %.1f", lam)
        results.append(run_protocol(build_trainer(cfg, "tlp-joint", lam), g, split, pcfg,
                                    method=f"tlp-joint[lambda={lam:.1f}]", threads=cfg["threads"]))
    _emit(results, args, False, "sweep")
    if args.out:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lambda", "mean_acc", "ci95", "N", "K"])
        for lam, r in zip(LAMBDA_GRID, results):
            writer.writerow([f"{lam:.1f}", repr(r.mean_acc), repr(r.ci95), r.N, r.K])
        atomic_write_text(Path(args.out) / "lambda_curve.csv", buf.getvalue())
    return 0


def cmd_export(cfg: RunConfig, args) -> int:
    out = _require_out(args)
    if args.checkpoint:
        g, _ = load_dataset(cfg)
        sidecar = Path(args.checkpoint).with_suffix(".json")
        names = json.loads(sidecar.read_text())["layers"] if sidecar.exists() else ["W1", "W2"]
        try:
            params = load_checkpoint(args.checkpoint, names)
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror or exc}") from None
        if params["W1"].shape[0] != g.feature_dim:
            raise ConfigError(f"checkpoint expects {params['W1'].shape[0]} features, dataset has {g.feature_dim}")
    else:
        g, split, pcfg = _prepare(cfg)
        params = _encoder_params(train_repeat(build_trainer(cfg), g, split, pcfg, 0, cfg["threads"]).snapshot)
    z, _ = encoder_forward(params, g.adjacency, g.compute_features)
    atomic_write_bytes(out / "embeddings.bin", fsnb_bytes(z))
    atomic_write_text(out / "embeddings.csv", embeddings_csv(z))
    print(json.dumps({"path": str(out), "nodes": z.shape[0], "dim": z.shape[1]}))
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    if args.draws < 1:
        raise ConfigError("draws must be >= 1")
    errors = run_suite(args.draws, cfg["seed"])
    report = {name: {"max_rel_error": err, "ok": err < TOLERANCE} for name, err in errors.items()}
    print(json.dumps(report, indent=2))
    return 0 if all(r["ok"] for r in report.values()) else 1


HANDLERS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "evaluate": cmd_evaluate,
    "sweep-lambda": cmd_sweep_lambda,
    "cluster-eval": lambda cfg, args: cmd_evaluate(cfg, args, cluster=True),
    "export-embeddings": cmd_export,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "tlpbench: error: a command is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(args.config, {k: getattr(args, k) for k in SCHEMA})
        return HANDLERS[args.command](cfg, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, BundleError, EpisodeError) as exc:
        print(f"tlpbench: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"tlpbench: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
