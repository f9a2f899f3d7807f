import os
from pathlib import Path

import numpy as np
import pytest

from tlpbench.graphdata import GraphBundle, LabelSplit, SbmSpec, generate_sbm


def pytest_collection_modifyitems(config, items):
    # keep the acceptance summary last so its report follows the unit tests
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


@pytest.fixture
def path_graph():
    """0 - 1 - 2 with 2-d features and two classes."""
    return GraphBundle.from_arrays(np.eye(3)[:, :2] + 0.5, [(0, 1), (1, 2)], [0, 1, 1])


@pytest.fixture(scope="session")
def small_sbm():
    """Separable 6-class SBM (40 nodes per class) with a 2/2/2 class split."""
    spec = SbmSpec(classes=6, nodes_per_class=40, p_in=0.3, p_out=0.01, feature_dim=12,
                   class_mean_separation=3.0, noise_std=1.0)
    return generate_sbm(spec, seed=5, split=LabelSplit((0, 1), (2, 3), (4, 5)))


def data_root() -> Path:
    return Path(os.environ.get("TLPBENCH_DATA", Path(__file__).resolve().parents[1] / "data"))


_REPORT_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_report(request):
    """Append ``(criterion, status, detail)`` lines for the end-of-run acceptance summary."""
    lines = request.config.stash.setdefault(_REPORT_KEY, [])
    return lambda number, status, detail: lines.append((number, status, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(lines, key=lambda line: line[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {status:<7} {detail}")
