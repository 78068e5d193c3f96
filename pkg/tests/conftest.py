import pytest

CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line, then assert on it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  [{number}] {title}: {detail}"
        request.config.stash[CRITERIA].append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("[", 1)[1].split("]", 1)[0])):
            terminalreporter.write_line(line)
