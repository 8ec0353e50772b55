import numpy as np
import pytest
import torch

from epr.data import build_split_stream, generate_synthetic_dataset
from epr.models import model_for_stream

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic_dataset(8, 20, 10, 16, seed=0)


@pytest.fixture(scope="session")
def tiny_stream(tiny_dataset):
    return build_split_stream("synthetic", 4, 2, 0, dataset=tiny_dataset, width=16)


@pytest.fixture
def tiny_model(tiny_stream):
    return model_for_stream("small-cnn", tiny_stream, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        detail = dict(report.user_properties).get("detail", "")
        if report.skipped:
            outcome = "SKIP"
            if not detail and isinstance(report.longrepr, tuple):
                detail = report.longrepr[2]
        else:
            outcome = "PASS" if report.passed else "FAIL"
        _CRITERIA[marker[0]] = (outcome, marker[1], detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        outcome, title, detail = _CRITERIA[number]
        terminalreporter.write_line(f"{outcome} criterion {number:>2} {title}: {detail}")
