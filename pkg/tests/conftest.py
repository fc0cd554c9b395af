import numpy as np
import pytest

from planecalib import solver, synth
from planecalib.geometry import CameraIntrinsics, Se3, axis_angle_quat

# Every LM run anywhere in the suite reports here; a test fails if any run it
# triggered accepted a step that increased the cost.
_ALL_REPORTS = []


@pytest.fixture(autouse=True)
def monotone_solver_runs():
    seen = []
    solver.add_report_listener(seen.append)
    try:
        yield seen
    finally:
        solver.remove_report_listener(seen.append)
    _ALL_REPORTS.extend(seen)
    bad = [r.label for r in seen if not r.is_monotone()]
    assert not bad, f"non-monotone accepted costs in solver runs {bad}"


@pytest.fixture
def all_solver_reports():
    return _ALL_REPORTS


@pytest.fixture
def pinhole():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 0.0, 0.0, 640, 480)


@pytest.fixture
def distorted():
    return CameraIntrinsics(510.0, 505.0, 322.0, 238.0, -0.1, 0.01, 640, 480)


def random_se3(rng, max_angle=np.pi, max_t=2.0):
    axis = rng.normal(size=3)
    return Se3(axis_angle_quat(axis, rng.uniform(0, max_angle)), rng.uniform(-max_t, max_t, 3))


@pytest.fixture(scope="session")
def courtyard():
    return synth.generate(synth.default_scene("courtyard", seed=1))


@pytest.fixture(scope="session")
def courtyard_noiseless():
    spec = synth.default_scene("courtyard", seed=3)
    spec.noise = synth.NoiseSpec(0.0, 0.0, 0.0)
    spec.init = synth.InitSpec(exact=True)
    return synth.generate(spec)


# ---------------------------------------------------------------------------
# acceptance reporting

_ACCEPTANCE = {}
_LAST = "test_criterion_09_monotonicity"


@pytest.fixture
def acceptance():
    """``record(number, ok, detail)`` stores one verdict line for the summary."""

    def record(number, ok, detail):
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_collection_modifyitems(items):
    # the suite-wide monotonicity check must see every other solver run first
    items.sort(key=lambda item: item.name == _LAST)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
