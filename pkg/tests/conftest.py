import numpy as np
import pytest

from gridpure.diffusion import build_schedule


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture
def gen():
    return np.random.default_rng(20240101)


def central_fd(f, x, coords, h=1e-4):
    """Central finite differences of scalar ``f`` at flat indices ``coords``."""
    out = []
    flat = x.ravel()
    for k in coords:
        xp, xm = flat.copy(), flat.copy()
        xp[k] += h
        xm[k] -= h
        out.append((f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


ACCEPTANCE: list[str] = []


def record(number, title, ok, detail, elapsed, limit):
    """Log one acceptance line; a criterion also fails if it overruns its time limit."""
    in_time = limit is None or elapsed < limit
    budget = "" if limit is None else f" / {limit:.0f}s"
    verdict = "PASS" if ok and in_time else "FAIL"
    line = f"criterion {number} [{title}]: {verdict} ({detail}; {elapsed:.1f}s{budget})"
    ACCEPTANCE.append(line)
    print(line)
    return ok and in_time


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
