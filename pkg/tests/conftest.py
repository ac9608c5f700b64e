import numpy as np
import pytest

from gamm.graph import AttributedGraph
from gamm.synth import SynthSpec, generate_sbm


def make_graph(n, edges, features=None, labels=None, d=2, seed=0):
    if features is None:
        features = np.random.default_rng(seed).normal(size=(n, d))
    return AttributedGraph.from_edges(n, edges, features, labels)


@pytest.fixture
def triangle():
    return make_graph(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def path3():
    return make_graph(3, [(0, 1), (1, 2)], features=np.array([[0.0], [1.0], [2.0]]))


@pytest.fixture
def star():
    return make_graph(5, [(0, k) for k in range(1, 5)], d=3)


@pytest.fixture(scope="session")
def sbm():
    return generate_sbm(SynthSpec(num_nodes=300, num_features=6, p_in=0.06, p_out=0.006, seed=3))


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_acceptance(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((criterion, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
