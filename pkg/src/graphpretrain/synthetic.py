"""Synthetic two-block item graphs and block-preferring users for end-to-end checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import FeatureStore, InteractionRecord, ItemGraph


@dataclass
class TwoBlockData:
    graph: ItemGraph
    store: FeatureStore
    blocks: np.ndarray


def two_block_graph(
    n_nodes: int = 500,
    p_in: float = 0.1,
    p_out: float = 0.005,
    dims: tuple[int, ...] = (16, 16),
    mean_scale: float = 1.0,
    seed: int = 0,
) -> TwoBlockData:
    """Stochastic block graph with unit weights and per-block Gaussian features.

    Modality ``i`` of a node is its block's mean vector plus unit noise; the
    block means are drawn once per modality with scale ``mean_scale``.
    """
    rng = np.random.default_rng(seed)
    blocks = np.repeat([0, 1], [n_nodes // 2, n_nodes - n_nodes // 2])
    same = blocks[:, None] == blocks[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n_nodes, n_nodes)) < prob, k=1)
    h, t = np.nonzero(upper)
    ids = [f"item{i}" for i in range(n_nodes)]
    graph = ItemGraph.from_edges(ids, {(int(a), int(b)): 1.0 for a, b in zip(h, t)})
    matrices = []
    for d in dims:
        means = rng.normal(0.0, mean_scale, size=(2, d))
        matrices.append(means[blocks] + rng.normal(size=(n_nodes, d)))
    store = FeatureStore([f"modality{i}" for i in range(len(dims))], matrices)
    return TwoBlockData(graph, store, blocks)


def block_interactions(
    blocks: np.ndarray,
    ids: list[str],
    n_users: int = 300,
    per_user: int = 10,
    noise: float = 0.0,
    seed: int = 0,
) -> list[InteractionRecord]:
    """Each user favours one block and draws ``per_user`` distinct items from it.

    With probability ``noise`` a draw comes from the other block instead.
    """
    rng = np.random.default_rng(seed)
    members = [np.flatnonzero(blocks == b) for b in (0, 1)]
    records = []
    for u in range(n_users):
        pref = int(rng.integers(2))
        chosen: set[int] = set()
        while len(chosen) < per_user:
            block = pref if rng.random() >= noise else 1 - pref
            chosen.add(int(rng.choice(members[block])))
        records.extend(InteractionRecord(f"user{u}", ids[i]) for i in sorted(chosen))
    return records
