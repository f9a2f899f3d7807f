"""Randomized finite-difference checks for every hand-derived gradient in the package."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .contrast import loss_bootstrap, loss_info_nce, loss_jsd, loss_supcon, pair_loss_on_valid_rows
from .episodes import Episode, protonet_episode
from .graphdata import GraphBundle
from .nn import (
    encoder_backward,
    encoder_forward,
    finite_diff_check,
    init_encoder,
    projection_backward,
    projection_forward,
    softmax_cross_entropy,
)
from .probe import probe_objective

TOLERANCE = 1e-4
Case = Callable[[np.random.Generator], float]


def _rows(rng, n, k):
    return rng.normal(size=(n, k))


def _random_graph(rng, n, d) -> GraphBundle:
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return GraphBundle(features=rng.normal(size=(n, d)), edges=edges, labels=rng.integers(0, 2, size=n))


def case_infonce(rng) -> float:
    n, k = rng.integers(2, 9), rng.integers(2, 5)
    tau = rng.uniform(0.3, 1.5)

    def f(p):
        value, gu, gv = loss_info_nce(p["U"], p["V"], tau)
        return value, {"U": gu, "V": gv}

    return finite_diff_check(f, {"U": _rows(rng, n, k), "V": _rows(rng, n, k)})


def case_jsd(rng) -> float:
    n, k = rng.integers(2, 9), rng.integers(2, 5)
    seed = int(rng.integers(1 << 30))

    def f(p):
        value, gu, gv = loss_jsd(p["U"], p["V"], seed)
        return value, {"U": gu, "V": gv}

    return finite_diff_check(f, {"U": _rows(rng, n, k), "V": _rows(rng, n, k)})


def case_supcon(rng) -> float:
    n, k = rng.integers(3, 9), rng.integers(2, 5)
    labels = np.concatenate([[0, 0], rng.integers(0, 3, size=n - 2)])
    tau = rng.uniform(0.3, 1.5)

    def f(p):
        value, g = loss_supcon(p["Z"], labels, tau)
        return value, {"Z": g}

    return finite_diff_check(f, {"Z": _rows(rng, n, k)})


def case_bootstrap(rng) -> float:
    n, k = rng.integers(1, 9), rng.integers(2, 5)
    target = _rows(rng, n, k)

    def f(p):
        value, g = loss_bootstrap(p["P"], target)
        return value, {"P": g}

    return finite_diff_check(f, {"P": _rows(rng, n, k)})


def case_protonet(rng) -> float:
    n_way, k_shot, m = rng.integers(2, 4), rng.integers(1, 3), 1
    total = n_way * (k_shot + m)
    nodes = rng.permutation(total)
    local = np.arange(n_way)
    ep = Episode(
        support=nodes[: n_way * k_shot],
        support_labels=np.repeat(local, k_shot),
        query=nodes[n_way * k_shot :],
        query_labels=np.repeat(local, m),
        class_map=tuple(range(n_way)),
    )

    def f(p):
        value, g, _ = protonet_episode(p["Z"], ep)
        return value, {"Z": g}

    return finite_diff_check(f, {"Z": _rows(rng, total, int(rng.integers(2, 5)))})


def case_probe(rng) -> float:
    s, h, n_way = rng.integers(2, 9), rng.integers(1, 5), rng.integers(2, 4)
    x = _rows(rng, s, h)
    y = rng.integers(0, n_way, size=s)
    l2 = rng.uniform(0.0, 0.1)
    params = {"W": _rows(rng, h, n_way), "b": rng.normal(size=n_way)}
    return finite_diff_check(lambda p: probe_objective(p, x, y, l2), params)


def case_gcn_ce(rng) -> float:
    """Encoder forward/backward (train-mode dropout, feature mask) under a CE head."""
    n, d = int(rng.integers(3, 9)), int(rng.integers(2, 5))
    g = _random_graph(rng, n, d)
    params = init_encoder(d, int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(1 << 30)))
    params["Wh"] = rng.normal(size=(params["W2"].shape[1], 3))
    targets = rng.integers(0, 3, size=n)
    mask = (rng.random(d) > 0.3).astype(float)
    drop_seed = int(rng.integers(1 << 30))

    def f(p):
        z, tape = encoder_forward(p, g.adjacency, g.features, train=True, dropout_p=0.3, seed=drop_seed, feature_mask=mask)
        value, d_logits = softmax_cross_entropy(z @ p["Wh"], targets)
        grads = encoder_backward(tape, d_logits @ p["Wh"].T)
        grads["Wh"] = z.T @ d_logits
        return value, grads

    return finite_diff_check(f, params)


def case_gcn_projection(rng) -> float:
    """Encoder + ELU projection head under InfoNCE between two graph views."""
    n, d = int(rng.integers(3, 9)), int(rng.integers(2, 5))
    g1, g2 = _random_graph(rng, n, d), _random_graph(rng, n, d)
    g2 = GraphBundle(features=g1.features, edges=g2.edges, labels=g1.labels)

    def f(p):
        z1, t1 = encoder_forward(p, g1.adjacency, g1.features)
        z2, t2 = encoder_forward(p, g2.adjacency, g2.features)
        h1, c1 = projection_forward(p, z1)
        h2, c2 = projection_forward(p, z2)
        value, gh1, gh2 = pair_loss_on_valid_rows(loss_info_nce, h1, h2, 0.5)
        gp1, gz1 = projection_backward(p, c1, gh1)
        gp2, gz2 = projection_backward(p, c2, gh2)
        e1, e2 = encoder_backward(t1, gz1), encoder_backward(t2, gz2)
        grads = {k: e1[k] + e2[k] for k in e1}
        grads.update({k: gp1[k] + gp2[k] for k in gp1})
        return value, grads

    while True:
        params = init_encoder(d, int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(1 << 30)), projection=True)
        # redraw degenerate instances: an all-zero projected row (undefined cosine) or a
        # flat loss (every ReLU path dead or collinear rows), where relative error is meaningless
        h1 = projection_forward(params, encoder_forward(params, g1.adjacency, g1.features)[0])[0]
        h2 = projection_forward(params, encoder_forward(params, g2.adjacency, g2.features)[0])[0]
        if np.all(np.abs(h1) > 1e-6) and np.all(np.abs(h2) > 1e-6):
            grads = f(params)[1]
            if np.sqrt(sum(np.sum(v * v) for v in grads.values())) > 1e-6:
                break
    return finite_diff_check(f, params)


CASES: dict[str, Case] = {
    "CE+GCN": case_gcn_ce,
    "InfoNCE": case_infonce,
    "JSD": case_jsd,
    "SupCon": case_supcon,
    "Bootstrap": case_bootstrap,
    "ProtoNet": case_protonet,
    "Probe": case_probe,
    "GCN+projection": case_gcn_projection,
}


def run_suite(draws: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per case over ``draws`` random instances."""
    worst = {}
    for i, (name, case) in enumerate(CASES.items()):
        rng = np.random.default_rng([seed, i])
        worst[name] = max(case(rng) for _ in range(draws))
    return worst
