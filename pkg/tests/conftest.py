import pytest

from vmfprobe.harness import TrainConfig, train

_VERDICTS = []


@pytest.fixture(scope="session")
def trained_default(tmp_path_factory):
    """The default configuration (method ``ours``, seed 0) trained once per session."""
    out = tmp_path_factory.mktemp("default_run")
    return train(TrainConfig(), out)


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
