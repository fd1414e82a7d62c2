import io

import numpy as np
import pytest

from metatne.graph import load_edge_list
from metatne.transform import TransformConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def path_graph():
    return load_edge_list(io.StringIO("0 1\n1 2\n"))


@pytest.fixture
def two_cliques():
    """Two K5s (nodes 0-4 and 5-9) joined by the bridge 4-5."""
    lines = []
    for base in (0, 5):
        for i in range(5):
            for j in range(i + 1, 5):
                lines.append(f"{base + i} {base + j}")
    lines.append("4 5")
    return load_edge_list(io.StringIO("\n".join(lines)))


@pytest.fixture
def small_cfg():
    return TransformConfig(d=8, d_prime=8, heads=2, d_ff=16, blocks=2, p_drop=0.0)


ACCEPTANCE_LINES = []


@pytest.fixture
def record(request):
    """Log one PASS/FAIL line for an acceptance criterion."""
    def _record(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
