"""Attributed graphs: loading, validation, GCN normalization, label splits, SBM synthesis.

Bundle directory layout::

    edges.csv       header ``src,dst``; one undirected edge per line (either direction)
    features.csv    n rows x d reals, no header      (or features.bin, FSNB binary)
    labels.csv      one integer class id per line
    splits.json     {"train": [...], "dev": [...], "test": [...]}   (optional)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .utils import atomic_write_bytes, atomic_write_text

FSNB_MAGIC = b"FSNB"
FSNB_HEADER = struct.Struct("<4sIII")  # magic, n, d, reserved
HIDDEN_LABEL = -1

# Features denser than this are multiplied as dense arrays.
_SPARSE_COMPUTE_DENSITY = 0.1


class BundleError(ValueError):
    """Malformed graph bundle or split assignment."""


@dataclass(frozen=True)
class LabelSplit:
    train: tuple[int, ...]
    dev: tuple[int, ...]
    test: tuple[int, ...]

    def __post_init__(self):
        for name in ("train", "dev", "test"):
            vals = tuple(sorted(int(c) for c in getattr(self, name)))
            if not vals:
                raise BundleError(f"split '{name}' is empty")
            if len(set(vals)) != len(vals):
                raise BundleError(f"split '{name}' lists a class twice")
            object.__setattr__(self, name, vals)
        for a, b in (("train", "dev"), ("train", "test"), ("dev", "test")):
            both = set(getattr(self, a)) & set(getattr(self, b))
            if both:
                raise BundleError(f"classes {sorted(both)} assigned to both '{a}' and '{b}'")

    @property
    def base(self) -> tuple[int, ...]:
        return tuple(sorted(self.train + self.dev))

    def as_dict(self) -> dict[str, list[int]]:
        return {"train": list(self.train), "dev": list(self.dev), "test": list(self.test)}


@dataclass(frozen=True, eq=False)
class GraphBundle:
    """Immutable attributed graph.

    ``edges`` holds canonical undirected pairs (src < dst), sorted and unique.
    Labels of ``HIDDEN_LABEL`` mark nodes whose class is withheld from a trainer.
    """

    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    split: LabelSplit | None = None
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if feats.ndim != 2:
            raise BundleError("features must be a 2-d matrix")
        n = feats.shape[0]
        if labels.shape[0] != n:
            raise BundleError(f"row-count mismatch: {n} feature rows but {labels.shape[0]} labels")
        if labels.size and labels.min() < HIDDEN_LABEL:
            raise BundleError("labels must be non-negative class ids")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise BundleError(f"edge endpoint out of range for n={n}")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise BundleError("self-loop edges are not allowed")
            if np.any(edges[:, 0] > edges[:, 1]):
                raise BundleError("edges must be canonical (src < dst); use GraphBundle.from_arrays")
            keys = edges[:, 0] * n + edges[:, 1]
            if np.any(np.diff(keys) <= 0):
                raise BundleError("edges must be sorted and unique; use GraphBundle.from_arrays")
        for arr in (feats, edges, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "labels", labels)
        if self.split is not None:
            present = set(np.unique(labels[labels >= 0]).tolist())
            declared = set(self.split.train + self.split.dev + self.split.test)
            if present and not declared <= present:
                raise BundleError(f"split names classes absent from labels: {sorted(declared - present)}")

    @classmethod
    def from_arrays(cls, features, edges, labels, split: LabelSplit | None = None, name: str = "") -> "GraphBundle":
        """Canonicalize an edge list given in either direction.

        A pair listed once per direction is one undirected edge; a pair
        repeated in the same direction is rejected as a duplicate.
        """
        features = np.asarray(features, dtype=np.float64)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        n = features.shape[0] if features.ndim == 2 else 0
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                bad = edges[(edges < 0).any(axis=1) | (edges >= n).any(axis=1)][0]
                raise BundleError(f"edge ({bad[0]},{bad[1]}) endpoint out of range for n={n}")
            loops = edges[:, 0] == edges[:, 1]
            if loops.any():
                raise BundleError(f"self-loop on node {edges[loops][0, 0]}")
            directed = edges[:, 0] * n + edges[:, 1]
            uniq, counts = np.unique(directed, return_counts=True)
            if np.any(counts > 1):
                k = uniq[counts > 1][0]
                raise BundleError(f"duplicate edge ({k // n},{k % n})")
            lo = edges.min(axis=1)
            hi = edges.max(axis=1)
            canon = np.unique(lo * n + hi)
            edges = np.stack([canon // n, canon % n], axis=1)
        return cls(features=features, edges=edges, labels=labels, split=split, name=name)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(np.unique(self.labels[self.labels >= 0]).tolist())

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Cached symmetric-normalized adjacency with self-loops."""
        if "adj" not in self._cache:
            self._cache["adj"] = normalize_adjacency(self)
        return self._cache["adj"]

    @property
    def compute_features(self):
        """Features in the cheapest multiplication form (CSR when mostly zero)."""
        if "xc" not in self._cache:
            x = self.features
            density = np.count_nonzero(x) / max(x.size, 1)
            self._cache["xc"] = sp.csr_matrix(x) if density < _SPARSE_COMPUTE_DENSITY else x
        return self._cache["xc"]

    def nodes_of_class(self, c: int) -> np.ndarray:
        key = ("nodes", int(c))
        if key not in self._cache:
            self._cache[key] = np.flatnonzero(self.labels == c)
        return self._cache[key]

    def with_labels(self, labels: np.ndarray) -> "GraphBundle":
        """Same structure and features, different label array (no split)."""
        g = GraphBundle(features=self.features, edges=self.edges, labels=labels, name=self.name)
        g._cache.update(adj=self.adjacency, xc=self.compute_features)
        return g

    def with_visible_classes(self, classes: Iterable[int]) -> "GraphBundle":
        """Copy whose labels outside ``classes`` are replaced by HIDDEN_LABEL."""
        keep = np.isin(self.labels, np.fromiter(classes, dtype=np.int64))
        return self.with_labels(np.where(keep, self.labels, HIDDEN_LABEL))


def split_label_space(g: GraphBundle, assignment: Mapping[str, Iterable[int]]) -> LabelSplit:
    keys = set(assignment)
    if keys != {"train", "dev", "test"}:
        raise BundleError(f"split assignment needs exactly train/dev/test, got {sorted(keys)}")
    split = LabelSplit(
        train=tuple(assignment["train"]), dev=tuple(assignment["dev"]), test=tuple(assignment["test"])
    )
    assigned = set(split.train + split.dev + split.test)
    present = set(g.classes)
    missing = present - assigned
    if missing:
        raise BundleError(f"classes {sorted(missing)} missing from split assignment")
    unknown = assigned - present
    if unknown:
        raise BundleError(f"split assignment names unknown classes {sorted(unknown)}")
    return split


def _normalized(n: int, edges: np.ndarray) -> sp.csr_matrix:
    src, dst = edges[:, 0], edges[:, 1]
    diag = np.arange(n)
    rows = np.concatenate([src, dst, diag])
    cols = np.concatenate([dst, src, diag])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return adj


def normalize_adjacency(g: GraphBundle) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 as CSR; isolated nodes get a unit diagonal."""
    return _normalized(g.num_nodes, g.edges)


def spmm(adj: sp.spmatrix, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    if h.ndim != 2 or adj.shape[1] != h.shape[0]:
        raise ValueError(f"shape mismatch: adjacency {adj.shape} vs dense {h.shape}")
    return np.asarray(adj @ h)


# ---------------------------------------------------------------------------
# Synthetic graphs


@dataclass(frozen=True)
class SbmSpec:
    classes: int
    nodes_per_class: int
    p_in: float
    p_out: float
    feature_dim: int
    class_mean_separation: float = 1.0
    noise_std: float = 1.0

    def __post_init__(self):
        if self.classes < 1 or self.nodes_per_class < 1 or self.feature_dim < 1:
            raise ValueError("SBM counts must be >= 1")
        for name in ("p_in", "p_out"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.class_mean_separation < 0 or self.noise_std < 0:
            raise ValueError("separation and noise_std must be >= 0")
        if self.feature_dim < self.classes:
            raise ValueError("feature_dim must be >= classes for orthogonal class means")


def generate_sbm(spec: SbmSpec, seed: int, split: LabelSplit | None = None, name: str = "sbm") -> GraphBundle:
    rng = np.random.default_rng(seed)
    n = spec.classes * spec.nodes_per_class
    labels = np.repeat(np.arange(spec.classes), spec.nodes_per_class)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], spec.p_in, spec.p_out)
    keep = rng.random(iu.shape[0]) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    means = np.zeros((spec.classes, spec.feature_dim))
    means[np.arange(spec.classes), np.arange(spec.classes)] = spec.class_mean_separation
    noise = rng.standard_normal((n, spec.feature_dim))
    features = means[labels] + spec.noise_std * noise
    return GraphBundle(features=features, edges=edges, labels=labels, split=split, name=name)


# ---------------------------------------------------------------------------
# Bundle I/O


def read_fsnb(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < FSNB_HEADER.size:
        raise BundleError(f"{path}: truncated FSNB header")
    magic, n, d, _ = FSNB_HEADER.unpack_from(raw)
    if magic != FSNB_MAGIC:
        raise BundleError(f"{path}: bad magic {magic!r}")
    body = np.frombuffer(raw, dtype="<f4", offset=FSNB_HEADER.size)
    if body.size != n * d:
        raise BundleError(f"{path}: expected {n}x{d} floats, found {body.size}")
    return body.reshape(n, d).astype(np.float64)


def fsnb_bytes(matrix: np.ndarray) -> bytes:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError("FSNB stores 2-d matrices")
    return FSNB_HEADER.pack(FSNB_MAGIC, m.shape[0], m.shape[1], 0) + m.tobytes()


def write_fsnb(path: str | Path, matrix: np.ndarray) -> None:
    atomic_write_bytes(path, fsnb_bytes(matrix))


def _read_edges(path: Path) -> np.ndarray:
    with path.open() as fh:
        header = fh.readline().strip().replace(" ", "")
        if header != "src,dst":
            raise BundleError(f"{path}: expected header 'src,dst', got {header!r}")
        rows = [line for line in fh if line.strip()]
    if not rows:
        return np.zeros((0, 2), dtype=np.int64)
    try:
        return np.array([[int(v) for v in line.split(",")] for line in rows], dtype=np.int64).reshape(-1, 2)
    except ValueError as exc:
        raise BundleError(f"{path}: {exc}") from exc


def load_bundle(path: str | Path) -> GraphBundle:
    root = Path(path)
    if not root.is_dir():
        raise BundleError(f"bundle directory not found: {root}")
    edges_path = root / "edges.csv"
    labels_path = root / "labels.csv"
    for required in (edges_path, labels_path):
        if not required.exists():
            raise BundleError(f"missing file: {required}")
    if (root / "features.bin").exists():
        features = read_fsnb(root / "features.bin")
    elif (root / "features.csv").exists():
        features = np.loadtxt(root / "features.csv", delimiter=",", dtype=np.float64, ndmin=2)
    else:
        raise BundleError(f"missing file: {root / 'features.csv'} (or features.bin)")
    try:
        labels = np.loadtxt(labels_path, dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise BundleError(f"{labels_path}: {exc}") from exc
    edges = _read_edges(edges_path)
    g = GraphBundle.from_arrays(features, edges, labels, name=root.name)
    splits_path = root / "splits.json"
    if splits_path.exists():
        split = split_label_space(g, json.loads(splits_path.read_text()))
        g = GraphBundle(g.features, g.edges, g.labels, split=split, name=g.name)
    return g


def write_bundle(g: GraphBundle, path: str | Path, binary_features: bool = False) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    atomic_write_text(root / "edges.csv", "src,dst\n" + "".join(f"{s},{t}\n" for s, t in g.edges))
    if binary_features:
        write_fsnb(root / "features.bin", g.features)
    else:
        lines = [",".join(repr(float(v)) for v in row) for row in g.features]
        atomic_write_text(root / "features.csv", "\n".join(lines) + "\n")
    atomic_write_text(root / "labels.csv", "".join(f"{int(y)}\n" for y in g.labels))
    if g.split is not None:
        atomic_write_text(root / "splits.json", json.dumps(g.split.as_dict()) + "\n")
