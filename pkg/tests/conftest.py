import numpy as np
import pytest

from dsod import model as M


TINY = M.DetectorConfig(
    image_size=(32, 32),
    dims=(6, 8, 10),
    hidden=(8, 8, 8),
    foundation_dim=6,
    foundation_hidden=8,
    inv_hidden=6,
    top_n=10,
    window_cells=1,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_params(tiny_config):
    """Full hybrid model: detector, locked foundation, projectors."""
    r = np.random.default_rng(7)
    params = M.init_detector(tiny_config, r)
    M.init_foundation(tiny_config, r, params)
    M.init_projectors(tiny_config, r, params)
    return params


@pytest.fixture
def tiny_images(tiny_config):
    r = np.random.default_rng(99)
    return r.uniform(0.0, 1.0, size=(3, 3, *tiny_config.image_size))



# ----------------------------------------------------------------- acceptance summary

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line of this test."""

    def add(text: str) -> None:
        request.node.user_properties.append(("note", text))

    return add


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1][len("test_criterion_") :]
        num, _, label = name.partition("_")
        notes = "; ".join(v for k, v in report.user_properties if k == "note")
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE[int(num)] = (outcome, label.replace("_", " "), notes)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        outcome, label, notes = _ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d} {outcome}  {label}" + (f"  ({notes})" if notes else ""))
