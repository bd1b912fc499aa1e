import numpy as np
import pytest

from graphpretrain.config import RunConfig
from graphpretrain.graph import FeatureStore, ItemGraph


def toy_graph() -> ItemGraph:
    """Six weighted nodes, one cycle plus a chord."""
    ids = [f"n{i}" for i in range(6)]
    edges = {(0, 1): 2, (1, 2): 1, (2, 3): 3, (3, 4): 1, (4, 5): 2, (0, 5): 1, (1, 4): 1}
    return ItemGraph.from_edges(ids, edges)


def toy_store(node_count=6, dims=(3, 4), seed=7) -> FeatureStore:
    rng = np.random.default_rng(seed)
    return FeatureStore([f"m{i}" for i in range(len(dims))], [rng.normal(size=(node_count, d)) for d in dims])


def toy_config(**overrides) -> RunConfig:
    base = dict(
        dim=8, depth=2, sizes=(3, 2), context_size=3, layers=2, beta=0.5,
        neg_count=2, batch_size=4, seed=3, steps=5,
    )  # fmt: skip
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def graph():
    return toy_graph()


@pytest.fixture
def store():
    return toy_store()


@pytest.fixture
def cfg():
    return toy_config()


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
