import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


_ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line per acceptance criterion, then assert."""
    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
