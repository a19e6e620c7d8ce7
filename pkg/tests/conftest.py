import numpy as np
import pytest

from cfpanel.panel import Panel


def random_panel(rng, N, T, k, clusters=None):
    """Panel with regressors x0..x{k-1}, a linear outcome y and entity effects."""
    alpha = rng.normal(size=N)
    cols = {f"x{j}": rng.normal(size=(N, T)) + rng.normal(size=(N, 1)) for j in range(k)}
    beta = rng.normal(size=k)
    y = alpha[:, None] + sum(b * cols[f"x{j}"] for j, b in enumerate(beta)) + rng.normal(size=(N, T))
    cols["y"] = y
    return Panel([f"e{i}" for i in range(N)], range(2000, 2000 + T), cols, clusters)


def random_count_panel(rng, N, T, k):
    """Poisson counts with multiplicative entity effects; no all-zero entities."""
    X = rng.normal(size=(N, T, k))
    beta = rng.uniform(-0.5, 0.5, size=k)
    c = rng.normal(0.5, 0.5, size=N)
    y = rng.poisson(np.exp(c[:, None] + X @ beta)).astype(float)
    y[y.sum(axis=1) == 0, 0] = 1.0
    cols = {f"x{j}": X[:, :, j] for j in range(k)}
    cols["y"] = y
    return Panel([f"e{i}" for i in range(N)], range(2000, 2000 + T), cols)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    """Log one acceptance line (shown in the terminal summary) and return ``ok``."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
