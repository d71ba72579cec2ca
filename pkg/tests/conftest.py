import numpy as np
import pytest

from frugalfl.model import Dataset, ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_spec():
    return ModelSpec((5, 6, 4, 1), "tanh", head_boundary=2, adapter_targets=("dense0.weight", "dense1.weight"))


@pytest.fixture
def toy_data(rng):
    x = rng.normal(size=(6, 5))
    y = np.array([0, 1, 1, 0, 1, 0])
    return Dataset(x, y, np.array(["A", "A", "A", "B", "B", "B"]))


_ACCEPTANCE = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE.append((marker.args[0], rep.passed, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, duration in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  ({duration:.2f}s)")
