import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def planted(n, d, r, gap=10.0, sigma=0.0, seed=0):
    """Rank-r matrix with singular values gap^(r-1) ... gap^0 times 10, plus noise."""
    from lrcp.synth import gen_low_rank_noise

    spectrum = [10.0 * gap ** (r - 1 - j) for j in range(r)]
    return gen_low_rank_noise(n, d, r, spectrum, sigma=sigma, seed=seed)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
