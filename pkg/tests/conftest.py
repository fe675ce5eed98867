from contextlib import contextmanager

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[_LINES]

    @contextmanager
    def check(name):
        info = {"detail": ""}
        try:
            yield info
        except BaseException as exc:
            line = f"FAIL  {name}: {info['detail']} ({type(exc).__name__}: {exc})".replace("\n", " ")
            lines.append(line)
            print(line)
            raise
        line = f"PASS  {name}: {info['detail']}"
        lines.append(line)
        print(line)

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
