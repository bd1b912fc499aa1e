"""Weighted item graph, per-node modality features, and their file formats."""

from __future__ import annotations

import itertools
import logging
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EmptyGraphError

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MGFEAT1\0"


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be non-empty")


class ItemGraph:
    """Undirected weighted graph in CSR form with an external-id bijection.

    Neighbour lists are sorted by dense index. Instances are treated as
    immutable once built.
    """

    def __init__(self, ids: Sequence[str], indptr, indices, weights):
        self.ids = list(ids)
        self.index = {item: i for i, item in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise DataError("duplicate node ids")
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.float64)
        for arr in (self.indptr, self.indices, self.weights):
            arr.flags.writeable = False

    @classmethod
    def from_edges(cls, ids: Sequence[str], edges: dict[tuple[int, int], float]) -> "ItemGraph":
        """Build from ``{(h, t): weight}`` with each undirected edge listed once."""
        n = len(ids)
        adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
        for (h, t), w in edges.items():
            if h == t:
                raise DataError(f"self-loop on {ids[h]!r}")
            if not w > 0:
                raise DataError(f"non-positive weight {w} on edge ({ids[h]!r}, {ids[t]!r})")
            adj[h].append((t, float(w)))
            adj[t].append((h, float(w)))
        indptr = np.zeros(n + 1, dtype=np.int64)
        indices, weights = [], []
        for h, row in enumerate(adj):
            row.sort()
            for (t, _), (t2, _) in zip(row, row[1:]):
                if t == t2:
                    raise DataError(f"duplicate edge ({ids[h]!r}, {ids[t]!r})")
            indices.extend(t for t, _ in row)
            weights.extend(w for _, w in row)
            indptr[h + 1] = indptr[h] + len(row)
        return cls(ids, indptr, indices, weights)

    @property
    def node_count(self) -> int:
        return len(self.ids)

    @property
    def edge_count(self) -> int:
        return len(self.indices) // 2

    def degree(self, h: int) -> int:
        return int(self.indptr[h + 1] - self.indptr[h])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, h: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[h], self.indptr[h + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def edges(self):
        """Yield ``(h, t, weight)`` once per undirected edge with ``h < t``."""
        for h in range(self.node_count):
            nbrs, ws = self.neighbors(h)
            for t, w in zip(nbrs.tolist(), ws.tolist()):
                if h < t:
                    yield h, t, w

    def edge_set(self) -> set[tuple[str, str, float]]:
        """Edges keyed by external id, order-normalised; used for equality checks."""
        out = set()
        for h, t, w in self.edges():
            a, b = sorted((self.ids[h], self.ids[t]))
            out.add((a, b, w))
        return out

    def non_isolated(self) -> np.ndarray:
        return np.flatnonzero(self.degrees() > 0)

    def validate(self) -> None:
        n = self.node_count
        if len(self.indptr) != n + 1 or self.indptr[0] != 0 or np.any(np.diff(self.indptr) < 0):
            raise DataError("malformed indptr")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise DataError("neighbour index out of range")
        if np.any(self.weights <= 0):
            raise DataError("non-positive edge weight")
        lookup = {}
        for h in range(n):
            nbrs, ws = self.neighbors(h)
            if np.any(nbrs == h):
                raise DataError(f"self-loop on {self.ids[h]!r}")
            if np.any(np.diff(nbrs) <= 0):
                raise DataError(f"unsorted or duplicate neighbours of {self.ids[h]!r}")
            for t, w in zip(nbrs.tolist(), ws.tolist()):
                lookup[(h, t)] = w
        for (h, t), w in lookup.items():
            if lookup.get((t, h)) != w:
                raise DataError(f"asymmetric edge ({self.ids[h]!r}, {self.ids[t]!r})")

    def subgraph(self, keep_ids: Iterable[str]) -> "ItemGraph":
        keep_set = set(keep_ids)
        keep = [i for i in self.ids if i in keep_set]
        remap = {self.index[i]: j for j, i in enumerate(keep)}
        edges = {}
        for h, t, w in self.edges():
            if h in remap and t in remap:
                edges[(remap[h], remap[t])] = w
        return ItemGraph.from_edges(keep, edges)

    def __eq__(self, other):
        if not isinstance(other, ItemGraph):
            return NotImplemented
        return (
            self.ids == other.ids
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.weights, other.weights)
        )

    def __repr__(self):
        return f"ItemGraph(nodes={self.node_count}, edges={self.edge_count})"


class _IdAssigner:
    def __init__(self):
        self.ids: list[str] = []
        self.index: dict[str, int] = {}

    def __call__(self, item: str) -> int:
        idx = self.index.get(item)
        if idx is None:
            idx = self.index[item] = len(self.ids)
            self.ids.append(item)
        return idx


def _co_occurrence_graph(groups: dict, assign: _IdAssigner, min_weight: int) -> ItemGraph:
    counts: Counter = Counter()
    for members in groups.values():
        for h, t in itertools.combinations(sorted(members), 2):
            counts[(h, t)] += 1
    edges = {pair: float(c) for pair, c in counts.items() if c >= min_weight}
    return ItemGraph.from_edges(assign.ids, edges)


def build_graph_from_interactions(
    records: Iterable[InteractionRecord], min_edge_weight: int = 1
) -> ItemGraph:
    """Connect items reviewed by the same user; weight = number of distinct such users."""
    if min_edge_weight < 1:
        raise DataError(f"min_edge_weight must be >= 1, got {min_edge_weight}")
    assign = _IdAssigner()
    by_user: dict[str, set[int]] = defaultdict(set)
    for rec in records:
        by_user[rec.user_id].add(assign(rec.item_id))
    if not by_user:
        raise EmptyGraphError("no interaction records: graph would be empty")
    return _co_occurrence_graph(by_user, assign, min_edge_weight)


def build_graph_from_tags(rows: Iterable[tuple[str, str]]) -> ItemGraph:
    """Connect items sharing a tag; weight = number of shared tags."""
    assign = _IdAssigner()
    by_tag: dict[str, set[int]] = defaultdict(set)
    for lineno, row in enumerate(rows, 1):
        if len(row) != 2 or not row[0] or not row[1]:
            raise DataError(f"malformed tag row {row!r}", line=lineno)
        item, tag = row
        by_tag[tag].add(assign(item))
    if not by_tag:
        raise EmptyGraphError("no tag rows: graph would be empty")
    return _co_occurrence_graph(by_tag, assign, 1)


# ---------------------------------------------------------------------------
# TSV readers


def _tsv_rows(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line.split("\t")


def read_interactions(path) -> Iterable[InteractionRecord]:
    """Parse ``user_id<TAB>item_id[<TAB>timestamp]`` lines; '#' lines are comments."""
    for lineno, cols in _tsv_rows(path):
        if len(cols) not in (2, 3) or not cols[0] or not cols[1]:
            raise DataError("expected user_id, item_id[, timestamp]", path=path, line=lineno)
        ts = None
        if len(cols) == 3 and cols[2]:
            try:
                ts = int(cols[2])
            except ValueError:
                raise DataError(f"bad timestamp {cols[2]!r}", path=path, line=lineno) from None
        yield InteractionRecord(cols[0], cols[1], ts)


def read_tags(path) -> Iterable[tuple[str, str]]:
    for lineno, cols in _tsv_rows(path):
        if len(cols) != 2 or not cols[0] or not cols[1]:
            raise DataError("expected item_id, tag", path=path, line=lineno)
        yield cols[0], cols[1]


# ---------------------------------------------------------------------------
# graph file: edge-list TSV plus node sidecar


def node_sidecar(path) -> Path:
    return Path(str(path) + ".nodes.tsv")


def _fmt_weight(w: float) -> str:
    return repr(float(w)) if not float(w).is_integer() else str(int(w))


def write_graph(graph: ItemGraph, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for h, t, w in graph.edges():
            fh.write(f"{graph.ids[h]}\t{graph.ids[t]}\t{_fmt_weight(w)}\n")
    with open(node_sidecar(path), "w", encoding="utf-8") as fh:
        for i, item in enumerate(graph.ids):
            fh.write(f"{i}\t{item}\n")


def read_graph(path) -> ItemGraph:
    path = Path(path)
    sidecar = node_sidecar(path)
    ids: list[str] = []
    if sidecar.exists():
        for lineno, cols in _tsv_rows(sidecar):
            if len(cols) != 2 or cols[0] != str(len(ids)):
                raise DataError("expected consecutive 'index<TAB>item_id' rows", path=sidecar, line=lineno)
            ids.append(cols[1])
    assign = _IdAssigner()
    for item in ids:
        assign(item)
    known = len(ids)
    edges: dict[tuple[int, int], float] = {}
    for lineno, cols in _tsv_rows(path):
        if len(cols) != 3:
            raise DataError("expected item_a, item_b, weight", path=path, line=lineno)
        try:
            w = float(cols[2])
        except ValueError:
            raise DataError(f"bad weight {cols[2]!r}", path=path, line=lineno) from None
        if not (math.isfinite(w) and w > 0):
            raise DataError(f"weight must be finite and positive, got {cols[2]}", path=path, line=lineno)
        h, t = assign(cols[0]), assign(cols[1])
        if known and len(assign.ids) > known:
            raise DataError(f"item {cols[0]!r}/{cols[1]!r} missing from node index", path=path, line=lineno)
        if h == t:
            raise DataError("self-loop", path=path, line=lineno)
        key = (min(h, t), max(h, t))
        if key in edges:
            raise DataError("duplicate edge", path=path, line=lineno)
        edges[key] = w
    return ItemGraph.from_edges(assign.ids, edges)


# ---------------------------------------------------------------------------
# features


@dataclass
class FeatureStore:
    """Per-modality dense features, rows aligned with graph node indices."""

    names: list[str]
    matrices: list[np.ndarray]

    def __post_init__(self):
        if not self.matrices:
            raise DataError("a feature store needs at least one modality")
        rows = {m.shape[0] for m in self.matrices}
        if len(rows) != 1:
            raise DataError(f"modalities disagree on row count: {sorted(rows)}")
        for name, m in zip(self.names, self.matrices):
            if m.ndim != 2 or m.shape[1] < 1:
                raise DataError(f"modality {name!r} must be a 2-D matrix with dim >= 1")
            if not np.all(np.isfinite(m)):
                r, c = np.argwhere(~np.isfinite(m))[0]
                raise DataError(f"non-finite value in modality {name!r} at row {r}, column {c}")

    @property
    def modality_count(self) -> int:
        return len(self.matrices)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.matrices)

    @property
    def node_count(self) -> int:
        return self.matrices[0].shape[0]


def index_sidecar(path) -> Path:
    return Path(str(path) + ".index.tsv")


def write_feature_file(path, ids: Sequence[str], matrix: np.ndarray) -> None:
    """Binary little-endian float32 matrix with a row -> item-id TSV sidecar."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DataError(f"matrix shape {matrix.shape} does not match {len(ids)} ids")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", matrix.shape[0], matrix.shape[1]))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    with open(index_sidecar(path), "w", encoding="utf-8") as fh:
        for i, item in enumerate(ids):
            fh.write(f"{i}\t{item}\n")


def write_feature_tsv(path, ids: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, row in zip(ids, np.asarray(matrix)):
            fh.write(item + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def _read_binary_features(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        fh.read(len(FEATURE_MAGIC))
        header = fh.read(16)
        if len(header) != 16:
            raise DataError("truncated header", path=path)
        rows, dim = struct.unpack("<QQ", header)
        body = fh.read()
    if len(body) != rows * dim * 4:
        raise DataError(f"body holds {len(body)} bytes, expected {rows * dim * 4}", path=path)
    matrix = np.frombuffer(body, dtype="<f4").reshape(rows, dim).astype(np.float64)
    sidecar = index_sidecar(path)
    if not sidecar.exists():
        raise DataError(f"missing index file {sidecar}", path=path)
    ids = []
    for lineno, cols in _tsv_rows(sidecar):
        if len(cols) == 2 and cols[0] == str(len(ids)):
            ids.append(cols[1])
        elif len(cols) == 1:
            ids.append(cols[0])
        else:
            raise DataError("expected 'row<TAB>item_id'", path=sidecar, line=lineno)
    if len(ids) != rows:
        raise DataError(f"index lists {len(ids)} ids for {rows} rows", path=sidecar)
    return ids, matrix


def _read_tsv_features(path: Path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    for lineno, cols in _tsv_rows(path):
        if len(cols) < 2:
            raise DataError("expected item_id followed by feature values", path=path, line=lineno)
        try:
            values = [float(v) for v in cols[1:]]
        except ValueError:
            raise DataError("non-numeric feature value", path=path, line=lineno) from None
        if rows and len(values) != len(rows[0]):
            raise DataError(f"row has {len(values)} values, expected {len(rows[0])}", path=path, line=lineno)
        if not all(math.isfinite(v) for v in values):
            raise DataError("non-finite feature value", path=path, line=lineno)
        ids.append(cols[0])
        rows.append(values)
    if not rows:
        raise DataError("no feature rows", path=path)
    return ids, np.array(rows, dtype=np.float64)


def read_feature_file(path) -> tuple[list[str], np.ndarray]:
    """Read either the binary format (detected by magic) or the TSV fallback."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(FEATURE_MAGIC))
    if head == FEATURE_MAGIC:
        return _read_binary_features(path)
    return _read_tsv_features(path)


def load_features(
    graph: ItemGraph, files: Sequence, names: Sequence[str] | None = None, strict: bool = True
) -> FeatureStore:
    """Load one modality per file, aligning rows to the graph's dense indices.

    In strict mode each file must cover exactly the graph's items. With
    ``strict=False`` rows for items outside the graph are ignored, but every
    graph node still needs a row.
    """
    if not files:
        raise DataError("at least one feature file is required")
    names = list(names) if names is not None else [Path(f).name for f in files]
    matrices = []
    for path in files:
        ids, matrix = read_feature_file(path)
        if strict and len(ids) != graph.node_count:
            raise DataError(
                f"feature row count mismatch: {len(ids)} rows for {graph.node_count} graph nodes", path=path
            )
        order = np.empty(graph.node_count, dtype=np.int64)
        seen = set()
        for row, item in enumerate(ids):
            idx = graph.index.get(item)
            if idx is None:
                if strict:
                    raise DataError(f"unknown item id {item!r} at row {row}", path=path)
                continue
            if idx in seen:
                raise DataError(f"duplicate item id {item!r} at row {row}", path=path)
            seen.add(idx)
            order[idx] = row
        if len(seen) != graph.node_count:
            raise DataError(
                f"feature row count mismatch: {len(seen)} of {graph.node_count} graph nodes covered", path=path
            )
        if not np.all(np.isfinite(matrix)):
            r, c = np.argwhere(~np.isfinite(matrix))[0]
            raise DataError(f"non-finite value at row {r}, column {c}", path=path)
        matrices.append(matrix[order])
    return FeatureStore(names, matrices)


def restrict_to_features(graph: ItemGraph, files: Sequence) -> ItemGraph:
    """Drop graph nodes missing from any feature file, warning about each drop."""
    covered = set(graph.ids)
    for path in files:
        ids, _ = read_feature_file(path)
        covered &= set(ids)
    missing = [i for i in graph.ids if i not in covered]
    if missing:
        log.warning("dropping %d items without features (e.g. %s)", len(missing), ", ".join(missing[:5]))
        return graph.subgraph(covered)
    return graph
