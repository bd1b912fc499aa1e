"""Contextual-neighbour sampling.

Starting from the target, each of the ``K`` expansion steps draws ``n_k``
weighted neighbours (with replacement) for every occurrence in the previous
step's list.  A node seen ``f`` times at step ``k`` earns ``f * (K - k + 1)``
points; the ``S`` highest-scoring non-target nodes become the context.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .graph import ItemGraph

# RNG stream domains; every generator is keyed (seed, domain, a, b).
CONTEXT_STREAM = 0
STEP_STREAM = 1
EXPORT_STREAM = 2
EVAL_STREAM = 3
INIT_STREAM = 4


def stream(seed: int, domain: int, a: int = 0, b: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, domain, a, b])


@dataclass(frozen=True)
class SamplerConfig:
    depth: int = 3
    sizes: tuple[int, ...] = (16, 8, 4)
    context_size: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.sizes) != self.depth:
            raise ConfigError(f"need {self.depth} sampling sizes, got {len(self.sizes)}")
        if any(n < 1 for n in self.sizes):
            raise ConfigError(f"sampling sizes must be >= 1, got {self.sizes}")
        if self.context_size < 1:
            raise ConfigError(f"context_size must be >= 1, got {self.context_size}")


class Role(enum.IntEnum):
    TARGET = 0
    CONTEXT = 1
    PAD = 2


@dataclass(frozen=True)
class ContextList:
    target: int
    neighbors: tuple[int, ...] = ()
    scores: tuple = field(default=(), compare=False)

    def __len__(self):
        return len(self.neighbors)

    @property
    def nodes(self) -> tuple[int, ...]:
        return (self.target,) + self.neighbors

    @property
    def positions(self) -> tuple[int, ...]:
        return tuple(range(len(self.neighbors) + 1))

    @property
    def roles(self) -> tuple[Role, ...]:
        return (Role.TARGET,) + (Role.CONTEXT,) * len(self.neighbors)


class AliasTable:
    """Walker/Vose alias table for O(1) draws from a fixed discrete distribution."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or not len(w) or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("alias table needs a non-empty vector of non-negative weights")
        self.prob, self.alias = _vose(w)

    def __len__(self):
        return len(self.prob)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        n = len(self.prob)
        col = np.minimum((rng.random(size) * n).astype(np.int64), n - 1)
        coin = rng.random(size)
        return np.where(coin < self.prob[col], col, self.alias[col])


def _vose(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(w)
    scaled = w * (n / w.sum())
    prob = np.ones(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] -= 1.0 - scaled[s]
        (small if scaled[g] < 1.0 else large).append(g)
    # leftovers are 1 up to rounding
    return prob, alias


def weighted_sample(neighbors, weights, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` neighbours with replacement, P(t) proportional to its weight.

    An empty neighbour list yields an empty result; callers skip such nodes.
    """
    neighbors = np.asarray(neighbors)
    if not len(neighbors):
        return neighbors[:0]
    return neighbors[AliasTable(weights).sample(rng, n)]


def importance_score(freq_by_step: Sequence[tuple[int, int]], depth: int):
    """Sum of ``f * (depth - k + 1)`` over ``(k, f)`` pairs, 1 <= k <= depth."""
    total = 0
    for k, f in freq_by_step:
        if not 1 <= k <= depth:
            raise ValueError(f"step {k} outside 1..{depth}")
        if f < 0:
            raise ValueError(f"negative frequency {f}")
        total += f * (depth - k + 1)
    return total


def rank_scores(target: int, scores: dict, context_size: int) -> ContextList:
    """Top-``context_size`` nodes by descending score, ties by ascending index."""
    ranked = sorted(((-s, t) for t, s in scores.items() if t != target and s > 0))
    top = ranked[:context_size]
    return ContextList(target, tuple(int(t) for _, t in top), tuple(-s for s, _ in top))


class MCNSampler:
    """Samples contextual neighbours over one graph; alias tables are built once."""

    def __init__(self, graph: ItemGraph, cfg: SamplerConfig):
        self.graph = graph
        self.cfg = cfg
        self._deg = graph.degrees()
        self._base = graph.indptr[:-1]
        self._prob = np.ones(len(graph.indices))
        self._alias = np.zeros(len(graph.indices), dtype=np.int64)
        for h in graph.non_isolated():
            lo, hi = graph.indptr[h], graph.indptr[h + 1]
            self._prob[lo:hi], self._alias[lo:hi] = _vose(graph.weights[lo:hi])

    def draw(self, sources: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One weighted neighbour per entry of ``sources`` (all must have degree >= 1)."""
        deg = self._deg[sources]
        base = self._base[sources]
        col = np.minimum((rng.random(len(sources)) * deg).astype(np.int64), deg - 1)
        slot = base + col
        coin = rng.random(len(sources))
        chosen = np.where(coin < self._prob[slot], slot, base + self._alias[slot])
        return self.graph.indices[chosen]

    def walk(self, target: int, rng: np.random.Generator) -> list[np.ndarray]:
        """The step lists S_1..S_K; occurrences of isolated nodes draw nothing."""
        steps = []
        current = np.array([target], dtype=np.int64)
        for n_k in self.cfg.sizes:
            current = current[self._deg[current] > 0]
            if not len(current):
                break
            current = self.draw(np.repeat(current, n_k), rng)
            steps.append(current)
        return steps

    def score(self, target: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Distinct non-target nodes reached and their integer importance scores."""
        steps = self.walk(target, rng)
        if not steps:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        depth = self.cfg.depth
        visited = np.concatenate(steps)
        points = np.concatenate([np.full(len(s), depth - k, dtype=np.int64) for k, s in enumerate(steps)])
        nodes, inverse = np.unique(visited, return_inverse=True)
        scores = np.bincount(inverse, weights=points).astype(np.int64)
        keep = nodes != target
        return nodes[keep], scores[keep]

    def sample(self, target: int, rng: np.random.Generator) -> ContextList:
        nodes, scores = self.score(target, rng)
        order = np.lexsort((nodes, -scores))[: self.cfg.context_size]
        return ContextList(target, tuple(nodes[order].tolist()), tuple(scores[order].tolist()))

    def expected_scores(self, target: int) -> dict[int, Fraction]:
        """Exact expected importance scores, replacing random draws by their means."""
        depth = self.cfg.depth
        scores: dict[int, Fraction] = defaultdict(Fraction)
        mass = {target: Fraction(1)}
        for k, n_k in enumerate(self.cfg.sizes, start=1):
            nxt: dict[int, Fraction] = defaultdict(Fraction)
            for t, c in mass.items():
                nbrs, ws = self.graph.neighbors(t)
                total = sum(Fraction(w) for w in ws.tolist())
                for t2, w in zip(nbrs.tolist(), ws.tolist()):
                    nxt[t2] += c * n_k * Fraction(w) / total
            for t2, c in nxt.items():
                if t2 != target:
                    scores[t2] += c * (depth - k + 1)
            mass = nxt
        return dict(scores)

    def expected_context(self, target: int) -> ContextList:
        return rank_scores(target, self.expected_scores(target), self.cfg.context_size)

    def sample_contexts(
        self, batch: Sequence[int], epoch: int = 0, threads: int = 1, domain: int = CONTEXT_STREAM
    ) -> list[ContextList]:
        """Contexts for ``batch`` in input order.

        Each target draws from its own generator keyed by (seed, epoch, target),
        so the result does not depend on ``threads`` or batch composition.
        """
        seed = self.cfg.seed

        def one(h):
            return self.sample(int(h), stream(seed, domain, epoch, int(h)))

        if threads <= 1 or len(batch) < 2:
            return [one(h) for h in batch]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, batch))


def sample_contexts(
    graph: ItemGraph, batch: Sequence[int], cfg: SamplerConfig, epoch: int = 0, threads: int = 1
) -> list[ContextList]:
    return MCNSampler(graph, cfg).sample_contexts(batch, epoch=epoch, threads=threads)
