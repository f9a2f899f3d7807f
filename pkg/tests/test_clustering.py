import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlpbench.clustering import ari, clustering_scores, kmeans, nmi


def set_partitions(n):
    """Every partition of n points as a restricted-growth label string."""
    def grow(prefix, top):
        if len(prefix) == n:
            yield list(prefix)
            return
        for c in range(top + 2):
            yield from grow(prefix + [c], max(top, c))
    if n == 0:
        return
    yield from grow([0], 0)


def nmi_oracle(a, b):
    n = len(a)
    ca, cb, cab = Counter(a), Counter(b), Counter(zip(a, b))
    h_a = -sum(c / n * math.log(c / n) for c in ca.values())
    h_b = -sum(c / n * math.log(c / n) for c in cb.values())
    if h_a == 0 and h_b == 0:
        return 1.0
    mi = sum(c / n * math.log((c / n) / ((ca[x] / n) * (cb[y] / n))) for (x, y), c in cab.items())
    return mi / ((h_a + h_b) / 2)


def ari_oracle(a, b):
    """Pair counting over every unordered pair of points."""
    same_both = same_a = same_b = diff_both = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        same_both += sa and sb
        same_a += sa and not sb
        same_b += sb and not sa
        diff_both += not sa and not sb
    num = 2 * (same_both * diff_both - same_a * same_b)
    den = (same_both + same_a) * (same_a + diff_both) + (same_both + same_b) * (same_b + diff_both)
    return 1.0 if den == 0 else num / den


def test_all_partition_pairs_up_to_five_points():
    for n in range(1, 6):
        parts = list(set_partitions(n))
        for a in parts:
            for b in parts:
                assert abs(nmi(a, b) - nmi_oracle(a, b)) < 1e-9
                assert abs(ari(a, b) - ari_oracle(a, b)) < 1e-9


@pytest.mark.parametrize("n", [6, 7, 8])
def test_all_partitions_against_references(n):
    rng = np.random.default_rng(n)
    references = [[0] * n, list(range(n))] + [rng.integers(0, 3, size=n).tolist() for _ in range(3)]
    for part in set_partitions(n):
        for ref in references:
            assert abs(nmi(part, ref) - nmi_oracle(part, ref)) < 1e-9
            assert abs(ari(part, ref) - ari_oracle(part, ref)) < 1e-9


def test_partition_counts_are_bell_numbers():
    assert [sum(1 for _ in set_partitions(n)) for n in range(1, 9)] == [1, 2, 5, 15, 52, 203, 877, 4140]


def test_reference_example():
    true, pred = [0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 1, 1]
    assert abs(ari(true, pred) - ari_oracle(true, pred)) < 1e-9


def test_degenerate_single_cluster():
    true = [0, 0, 0, 1, 1, 1]
    assert nmi(true, [0] * 6) == 0.0
    assert ari(true, [0] * 6) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=30), st.integers(0, 2**32 - 1))
def test_symmetry_and_relabeling(labels, seed):
    rng = np.random.default_rng(seed)
    a = np.array(labels)
    b = rng.integers(0, 3, size=a.size)
    relabel = rng.permutation(10)
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)
    assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-12)
    assert nmi(relabel[a], b) == pytest.approx(nmi(a, b), abs=1e-12)
    assert ari(a, relabel[b] + 100) == pytest.approx(ari(a, b), abs=1e-12)


def blobs(rng, k=3, per=30, dim=4, spread=0.1):
    centers = rng.normal(size=(k, dim)) * 10
    x = np.concatenate([c + spread * rng.normal(size=(per, dim)) for c in centers])
    return x, np.repeat(np.arange(k), per)


def test_separated_clouds_are_recovered():
    x, y = blobs(np.random.default_rng(0), k=2)
    assert clustering_scores(x, y, 2, seed=1) == (1.0, 1.0)


def test_kmeans_is_seeded_and_restarts_help():
    x, _ = blobs(np.random.default_rng(1), k=5, spread=2.0)
    a, b = kmeans(x, 5, seed=3), kmeans(x, 5, seed=3)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[2] == b[2]
    single = min(kmeans(x, 5, seed=s, n_init=1)[2] for s in range(1))
    assert a[2] <= single + 1e-9


def test_kmeans_inertia_and_centers_are_consistent():
    x, _ = blobs(np.random.default_rng(2), k=3, spread=1.0)
    labels, centers, inertia = kmeans(x, 3, seed=0)
    for c in range(3):
        np.testing.assert_allclose(centers[c], x[labels == c].mean(axis=0), rtol=1e-12)
    assert inertia == pytest.approx(np.sum((x - centers[labels]) ** 2), rel=1e-12)
    # Lloyd fixed point: every point sits at its nearest center
    d = ((x[:, None] - centers[None]) ** 2).sum(axis=2)
    np.testing.assert_array_equal(np.argmin(d, axis=1), labels)


def test_duplicate_points_still_fill_every_cluster():
    x = np.array([[0.0], [0.0], [0.0], [0.0], [5.0]])
    labels, _, _ = kmeans(x, 3, seed=0)
    assert len(set(labels.tolist())) == 3


def test_input_validation():
    with pytest.raises(ValueError):
        clustering_scores(np.zeros((3, 2)), [0, 1, 2], 1)
    with pytest.raises(ValueError, match="fewer points"):
        clustering_scores(np.zeros((2, 2)), [0, 1], 3)
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 2)), 3)
