"""Convert a Planetoid raw release (ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index}) to a graph bundle.

    python scripts/convert_planetoid.py RAW_DIR citeseer data/citeseer

Follows the usual loader conventions: test rows are put back in node-id order,
CiteSeer's test-index gaps (isolated nodes without features) become zero rows
with class 0, and the adjacency dict is symmetrized with self-loops and
duplicates dropped. The class split is written in sorted class-id order.
"""

from __future__ import annotations

import argparse
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from tlpbench.cli import DEFAULT_CLASS_SPLITS
from tlpbench.graphdata import GraphBundle, split_label_space, write_bundle


def _load(raw: Path, name: str, part: str):
    with (raw / f"ind.{name}.{part}").open("rb") as fh:
        return pickle.load(fh, encoding="latin1")


def planetoid_arrays(raw: Path, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(features n x d, undirected edges m x 2, labels n) in node-id order."""
    allx, ally, tx, ty = (_load(raw, name, p) for p in ("allx", "ally", "tx", "ty"))
    graph = _load(raw, name, "graph")
    test_index = np.loadtxt(raw / f"ind.{name}.test.index", dtype=np.int64, ndmin=1)
    lo, hi = int(test_index.min()), int(test_index.max())
    if lo != allx.shape[0]:
        raise ValueError(f"test ids start at {lo}, expected {allx.shape[0]} (right after allx)")
    # row i of tx belongs to node test_index[i]; ids missing from the block keep zero rows
    span = hi - lo + 1
    tx_dense = sp.csr_matrix(tx).toarray()
    tx_full = np.zeros((span, tx_dense.shape[1]))
    ty_full = np.zeros((span, np.asarray(ty).shape[1]))
    tx_full[test_index - lo] = tx_dense
    ty_full[test_index - lo] = ty
    features = np.vstack([sp.csr_matrix(allx).toarray(), tx_full])
    onehot = np.vstack([np.asarray(ally), ty_full])
    labels = onehot.argmax(axis=1)
    n = features.shape[0]

    pairs = [(int(s), int(t)) for s, nbrs in graph.items() for t in nbrs]
    e = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    e = e[(e[:, 0] != e[:, 1]) & (e < n).all(axis=1)]
    return features, np.unique(np.sort(e, axis=1), axis=0), labels


def convert(raw: Path, name: str, out: Path, binary: bool = True) -> GraphBundle:
    features, edges, labels = planetoid_arrays(raw, name)
    g = GraphBundle(features=features, edges=edges, labels=labels, name=name)
    counts = DEFAULT_CLASS_SPLITS.get(name.lower())
    if counts is not None:
        classes = g.classes
        a, b = counts[0], counts[0] + counts[1]
        split = split_label_space(g, {"train": classes[:a], "dev": classes[a:b], "test": classes[b:]})
        g = GraphBundle(g.features, g.edges, g.labels, split=split, name=name)
    write_bundle(g, out, binary_features=binary)
    return g


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("raw_dir", type=Path)
    parser.add_argument("name", help="dataset prefix in the raw file names, e.g. cora or citeseer")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--csv-features", action="store_true", help="write features.csv instead of features.bin")
    args = parser.parse_args(argv)
    g = convert(args.raw_dir, args.name, args.out_dir, binary=not args.csv_features)
    print(f"{args.out_dir}: n={g.num_nodes} m={g.num_edges} d={g.feature_dim} classes={g.num_classes}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
