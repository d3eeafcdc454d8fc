import pathlib

import pytest

from wavemux import use_backend
from wavemux.model import DetectionParams, SourceParams
from wavemux.simulator import SimConfig

ROOT = pathlib.Path(__file__).resolve().parents[1]
PRESETS = ROOT / "presets"


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    with use_backend(request.param):
        yield request.param


@pytest.fixture
def small_cfg():
    """A few hundred frames at the multimode operating point (0.21 S photons per frame), with some dark counts."""
    return SimConfig(source=SourceParams(p_mode=0.21 / (675 * 0.08)), detection=DetectionParams(dark_rate=0.05),
                     n_frames=400, master_seed=11)


@pytest.fixture
def lossless_cfg():
    return SimConfig(source=SourceParams(p_mode=0.01), detection=DetectionParams(eta_S=1.0, eta_AS=1.0, chi_R0=1.0),
                     n_frames=300, master_seed=3)


_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
