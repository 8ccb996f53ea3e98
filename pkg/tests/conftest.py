import pytest
import torch

from gcpo.policy import init_policy, snapshot
from gcpo.tasks import TaskSpec


@pytest.fixture
def task():
    return TaskSpec("modadd", 1)


@pytest.fixture
def tiny(task):
    """Small float64 policy with a random output head (not uniform)."""
    model = init_policy(16, 1, task.vocab, seed=3, max_context=64, n_heads=2, dtype=torch.float64)
    g = torch.Generator().manual_seed(11)
    with torch.no_grad():
        model.head.normal_(0.0, 0.5, generator=g)
    return model


@pytest.fixture
def tiny_snap(tiny):
    return snapshot(tiny, version=1)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
