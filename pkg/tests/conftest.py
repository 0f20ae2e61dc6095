import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memstream.encoder import FrameInput  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def as_inputs(frames, grids):
    return [FrameInput(t, grids[t], frames[t]) for t in range(len(frames))]


@pytest.fixture
def to_inputs():
    return as_inputs


_criteria: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    n, title = marker.args
    _, outcomes = _criteria.setdefault(n, (title, []))
    if call.when == "call" or call.excinfo is not None:
        outcomes.append("FAIL" if call.excinfo is not None else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, outcomes = _criteria[n]
        status = "PASS" if outcomes and all(o == "PASS" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {title} ({len(outcomes)} check{'' if len(outcomes) == 1 else 's'})")
