import numpy as np
import pytest

from fwgraph.hamiltonian_model import duffing, harmonic
from fwgraph.level_integrals import edge_coefficients, gluing_probabilities
from fwgraph.topology import analyse

S1_BOX = (-4.5, 4.5, -4.5, 4.5)
S2_BOX = (-3.0, 3.0, -3.0, 3.0)


@pytest.fixture(scope="session")
def s1():
    return harmonic(epsilon=0.05)


@pytest.fixture(scope="session")
def s2():
    return duffing(epsilon=0.01)


@pytest.fixture(scope="session")
def s1_graph(s1):
    return analyse(s1, 8.0, S1_BOX)


@pytest.fixture(scope="session")
def s2_graph(s2):
    return analyse(s2, 2.0, S2_BOX)


@pytest.fixture(scope="session")
def s1_coeffs(s1, s1_graph):
    return edge_coefficients(s1, s1_graph, 0, levels_per_edge=48)


@pytest.fixture(scope="session")
def s2_coeffs(s2, s2_graph):
    return {e.id: edge_coefficients(s2, s2_graph, e.id, levels_per_edge=48, with_defect=False)
            for e in s2_graph.edges}


@pytest.fixture(scope="session")
def s2_gluing(s2, s2_graph):
    return gluing_probabilities(s2, s2_graph, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def record_criterion():
    """Record one ``criterion N: PASS|FAIL`` line; the lines are echoed in the terminal summary."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
