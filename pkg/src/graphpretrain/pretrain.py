"""Pre-training: masked context batches, the two reconstruction losses, and the loop."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .config import RunConfig
from .embedding import ContextBatch, collate
from .encoder import COSINE_FLOOR, target_representation
from .errors import DataError, NumericalFault
from .graph import FeatureStore, ItemGraph
from .model import ModelParams, forward, reconstruct
from .sampling import EXPORT_STREAM, INIT_STREAM, STEP_STREAM, AliasTable, ContextList, MCNSampler, stream

log = logging.getLogger(__name__)

MASK_FRACTION = 0.2
ACTION_PROBS = (0.8, 0.1, 0.1)


class MaskAction(enum.IntEnum):
    MASK_TOKEN = 0
    RANDOM_NODE = 1
    KEEP = 2


@dataclass(frozen=True)
class MaskPlan:
    """Masked context positions (1-based within the list) and what each becomes."""

    slots: tuple[int, ...] = ()
    actions: tuple[MaskAction, ...] = ()
    replacements: tuple[int, ...] = ()

    def __len__(self):
        return len(self.slots)

    def inputs(self):
        """``(slot, replacement)`` per slot whose input changes; None means zero features."""
        for slot, action, repl in zip(self.slots, self.actions, self.replacements):
            if action == MaskAction.MASK_TOKEN:
                yield slot, None
            elif action == MaskAction.RANDOM_NODE:
                yield slot, repl


def mask_count(context_len: int) -> int:
    """20% of the context, rounded half up, at least one for a non-empty context."""
    if context_len <= 0:
        return 0
    return max(1, math.floor(MASK_FRACTION * context_len + 0.5))


def build_mask_plan(ctx: ContextList | int, rng: np.random.Generator, node_count: int = 0) -> MaskPlan:
    """Choose masked context slots; the target slot 0 is never touched.

    ``node_count`` is the pool for random-node substitution.
    """
    n = ctx if isinstance(ctx, int) else len(ctx)
    count = mask_count(n)
    if not count:
        return MaskPlan()
    slots = np.sort(rng.choice(np.arange(1, n + 1), size=count, replace=False))
    draws = rng.random(count)
    actions = np.searchsorted(np.cumsum(ACTION_PROBS)[:-1], draws, side="right")
    pool = max(node_count, 1)
    replacements = rng.integers(0, pool, size=count)
    return MaskPlan(
        tuple(int(s) for s in slots),
        tuple(MaskAction(int(a)) for a in actions),
        tuple(int(r) if a == MaskAction.RANDOM_NODE else -1 for r, a in zip(replacements, actions)),
    )


def negative_distribution(graph: ItemGraph, power: float = 0.75) -> np.ndarray:
    deg = graph.degrees().astype(np.float64) ** power
    total = deg.sum()
    if not total > 0:
        raise DataError("graph has no edges; cannot draw negatives")
    return deg / total


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    dot = ad.sum_(a * b, axis=-1)
    na = ad.row_l2_norm(a, COSINE_FLOOR)[..., 0]
    nb = ad.row_l2_norm(b, COSINE_FLOOR)[..., 0]
    return dot / (na * nb)


def edge_loss(h: Tensor, positive: Tensor, negatives: Tensor | None = None) -> Tensor:
    """Contrastive structure loss averaged over targets.

    ``h`` and ``positive`` are ``(B, d)``; ``negatives`` is ``(B, Q, d)`` or
    None for the positive-only ablation.
    """
    h = ad.as_tensor(h)
    per_target = -ad.log_sigmoid(_cosine(h, positive))
    if negatives is not None and negatives.shape[-2] > 0:
        neg_cos = _cosine(ad.reshape(h, (h.shape[0], 1, h.shape[1])), negatives)
        per_target = per_target - ad.sum_(ad.log_sigmoid(-neg_cos), axis=-1)
    return ad.mean(per_target)


def feature_weights(plans: Sequence[MaskPlan], length: int) -> np.ndarray:
    """Slot weights realising mean-over-targets of mean-over-masked-slots.

    Targets with no masked slot get zero weight and do not count in the mean.
    """
    w = np.zeros((len(plans), length))
    active = [r for r, p in enumerate(plans) if len(p)]
    for r in active:
        w[r, list(plans[r].slots)] = 1.0 / len(plans[r])
    if active:
        w /= len(active)
    return w


def feature_loss(hl: Tensor, weights: np.ndarray, true_features: Sequence[np.ndarray], params: ModelParams) -> Tensor:
    """Weighted squared error of reconstructed modalities against the original features."""
    if not np.any(weights):
        return Tensor(0.0)
    total = None
    for pred, x in zip(reconstruct(hl, params), true_features):
        sq = ad.sum_(ad.square(pred - x), axis=-1)
        total = sq if total is None else total + sq
    return ad.sum_(total * weights)


@dataclass
class TrainBatch:
    """One optimisation step's inputs.

    Rows ``[0, n_targets)`` of ``batch`` are the masked target lists; the rest
    are unmasked endpoint lists indexed by ``positive_rows``/``negative_rows``.
    """

    targets: np.ndarray
    batch: ContextBatch
    n_targets: int
    positive_rows: np.ndarray
    negative_rows: np.ndarray
    plans: list[MaskPlan]
    recon_weights: np.ndarray
    true_features: list[np.ndarray]


@dataclass
class LossBreakdown:
    edge: float
    feature: float
    total: float


def objective(params: ModelParams, tb: TrainBatch, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, edge, feature)`` loss tensors for a prepared batch."""
    hl = forward(params, tb.batch)
    reps = target_representation(hl)
    h = reps[: tb.n_targets]
    endpoints = reps[tb.n_targets :]
    pos = ad.gather_rows(endpoints, tb.positive_rows)
    neg = ad.gather_rows(endpoints, tb.negative_rows) if tb.negative_rows.shape[1] else None
    edge = edge_loss(h, pos, neg)
    feat = feature_loss(hl[: tb.n_targets], tb.recon_weights, tb.true_features, params)
    total = edge + lam * feat if lam else edge
    return total, edge, feat


class Pretrainer:
    def __init__(self, graph: ItemGraph, store: FeatureStore, cfg: RunConfig, params: ModelParams | None = None):
        if store.node_count != graph.node_count:
            raise DataError(f"features cover {store.node_count} nodes, graph has {graph.node_count}")
        self.graph = graph
        self.store = store
        self.cfg = cfg
        self.sampler = MCNSampler(graph, cfg.sampler_config())
        self.trainable = graph.non_isolated()
        if not len(self.trainable):
            raise DataError("graph has no edges; nothing to pre-train on")
        self.negatives = AliasTable(negative_distribution(graph))
        if params is None:
            params = ModelParams.init(cfg.model_config(store.dims), stream(cfg.seed, INIT_STREAM))
        self.params = params
        self.optimizer = Adam(params.parameters(), lr=cfg.learning_rate, clip_norm=cfg.clip_norm)
        self.step_count = 0

    @property
    def length(self) -> int:
        return self.cfg.context_size + 1

    def make_batch(self, step: int, targets: Sequence[int] | None = None) -> TrainBatch:
        cfg = self.cfg
        rng = stream(cfg.seed, STEP_STREAM, step)
        if targets is None:
            size = min(cfg.batch_size, len(self.trainable))
            targets = rng.choice(self.trainable, size=size, replace=False)
        targets = np.asarray(targets, dtype=np.int64)
        if np.any(self.graph.degrees()[targets] == 0):
            raise DataError("batch targets must have at least one neighbour")
        positives = self.sampler.draw(targets, rng)
        negatives = self.negatives.sample(rng, (len(targets), cfg.neg_count))
        endpoint_nodes, inverse = np.unique(np.concatenate([positives, negatives.ravel()]), return_inverse=True)
        positive_rows = inverse[: len(targets)]
        negative_rows = inverse[len(targets) :].reshape(len(targets), cfg.neg_count)

        needed = np.unique(np.concatenate([targets, endpoint_nodes]))
        contexts = dict(zip(needed.tolist(), self.sampler.sample_contexts(needed, epoch=step, threads=cfg.threads)))
        target_ctx = [contexts[h] for h in targets.tolist()]
        plans = [build_mask_plan(c, rng, self.graph.node_count) for c in target_ctx]
        lists = target_ctx + [contexts[t] for t in endpoint_nodes.tolist()]
        batch = collate(lists, self.store, self.length, plans + [None] * len(endpoint_nodes))
        clean = collate(target_ctx, self.store, self.length)
        return TrainBatch(
            targets,
            batch,
            len(targets),
            positive_rows,
            negative_rows,
            plans,
            feature_weights(plans, self.length),
            clean.features,
        )

    def train_step(self, targets: Sequence[int] | None = None) -> LossBreakdown:
        tb = self.make_batch(self.step_count, targets)
        with Tape() as tape:
            total, edge, feat = objective(self.params, tb, self.cfg.lam)
        if not math.isfinite(total.item()):
            raise NumericalFault(f"non-finite loss at step {self.step_count}; parameters left unchanged")
        self.optimizer.zero_grad()
        tape.backward(total)
        self.optimizer.step()
        self.step_count += 1
        return LossBreakdown(edge.item(), feat.item(), total.item())

    def run(self, steps: int | None = None, callback=None) -> list[LossBreakdown]:
        steps = self.cfg.steps if steps is None else steps
        history = []
        for _ in range(steps):
            losses = self.train_step()
            history.append(losses)
            if callback is not None:
                callback(self.step_count, losses)
        return history

    def export_embeddings(self, chunk: int = 256) -> np.ndarray:
        return export_embeddings(self.graph, self.store, self.params, self.sampler, chunk=chunk)


def export_embeddings(
    graph: ItemGraph,
    store: FeatureStore,
    params: ModelParams,
    sampler: MCNSampler,
    chunk: int = 256,
    threads: int = 1,
) -> np.ndarray:
    """``(nodeCount, d_0)`` target representations from unmasked contexts.

    Contexts come from a dedicated RNG stream, so the table is a pure
    function of (graph, features, parameters, seed).
    """
    length = params.config.context_size + 1
    out = np.empty((graph.node_count, params.config.dim))
    nodes = np.arange(graph.node_count)
    for lo in range(0, graph.node_count, chunk):
        part = nodes[lo : lo + chunk]
        contexts = sampler.sample_contexts(part, epoch=0, threads=threads, domain=EXPORT_STREAM)
        hl = forward(params, collate(contexts, store, length))
        out[lo : lo + len(part)] = hl.data[:, 0, :]
    return out
