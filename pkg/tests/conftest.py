import numpy as np
import pytest

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gram_schmidt(vectors):
    """Classical Gram-Schmidt on the rows, written out by hand (test oracle)."""
    basis = []
    for v in np.asarray(vectors, dtype=float):
        w = v.copy()
        for b in basis:
            w = w - sum(w[i] * b[i] for i in range(len(w))) * b
        n = np.sqrt(sum(c * c for c in w))
        if n > 1e-10:
            basis.append(w / n)
    return np.array(basis)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {name}: {detail}")
