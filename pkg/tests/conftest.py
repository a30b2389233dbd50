import numpy as np
import pytest

from gmelstm.data import ClipArrays


def make_arrays(n=4, T=5, dims=(3, 2, 4), lengths=None, seed=0, prefix="c"):
    rng = np.random.default_rng(seed)
    lengths = [T] * n if lengths is None else lengths
    mask = np.arange(T)[None] < np.asarray(lengths)[:, None]
    w, a, v = (rng.normal(size=(n, T, d)) * mask[:, :, None] for d in dims)
    return ClipArrays([f"{prefix}{i}" for i in range(n)], [f"s{i % 3}" for i in range(n)],
                      [["tok"] * T for _ in range(n)], rng.uniform(-3, 3, n), w, a, v, mask)


@pytest.fixture
def arrays():
    return make_arrays(lengths=[5, 3, 1, 4])


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion(request):
    """Record one PASS/FAIL line for the end-of-run acceptance summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)

    return record
