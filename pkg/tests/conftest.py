import pytest
from hypothesis import settings

from dfam_detr import tensor as T

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def restore_precision():
    mode = T.get_precision()
    yield
    T.set_precision(mode)


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; the line is printed now and again in the summary."""
    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        request.config.stash.setdefault(_VERDICTS, []).append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
