import numpy as np
import pytest

from dnbd.beamformer import build_basis


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_pd(rng, m, cond_floor=0.1):
    A = crandn(rng, m, m)
    return A @ A.conj().T / m + cond_floor * np.eye(m)


def random_network(rng, J=None, S=None, sizes=None):
    """Random basis and per-node PD covariance blocks for a small network."""
    J = J or int(rng.integers(2, 7))
    S = S or int(rng.integers(1, 4))
    sizes = sizes or [int(rng.integers(max(2, S), 7)) for _ in range(J)]
    Q = crandn(rng, sum(sizes), S)
    selection = (rng.random((J, S)) < 0.5).astype(float)
    selection[:, 0] = 1
    basis = build_basis(Q, sizes, selection)
    blocks = [random_pd(rng, m) for m in sizes]
    return basis, blocks


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
