import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from sotaseg.synthesis import InMemoryDataset, SynthConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_cfg():
    return SynthConfig(image_size=(64, 64), seed=3)


@pytest.fixture(scope="session")
def small_samples(small_cfg):
    return InMemoryDataset.synthesize(small_cfg, 12)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# one pass/fail line per acceptance criterion, printed in the terminal summary
_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        previous = _CRITERIA.get(number, (title, "PASS"))[1]
        status = "FAIL" if failed or previous == "FAIL" else "PASS"
        _CRITERIA[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
