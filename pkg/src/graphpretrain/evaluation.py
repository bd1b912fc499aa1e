"""Transfer evaluation: ranking metrics, AUC, and small downstream models.

Retrieval uses a dot-product two-tower model; CTR uses a logistic scorer
over ``[user, item, user * item]``.  Both train on each positive plus one
uniformly drawn unobserved item, and both can start their item table from
pre-trained vectors or from random values.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .errors import DataError
from .graph import InteractionRecord
from .sampling import EVAL_STREAM, stream

log = logging.getLogger(__name__)

ARMS = ("pretrained", "random")


def recall_at_k(ranked: Sequence, relevant, k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("recall needs at least one relevant item")
    hits = sum(1 for item in list(ranked)[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: Sequence, relevant, k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("ndcg needs at least one relevant item")
    dcg = 0.0
    for rank, item in enumerate(list(ranked)[:k], start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = 0.0
    for rank in range(1, min(len(relevant), k) + 1):
        ideal += 1.0 / math.log2(rank + 1)
    return dcg / ideal


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if not n_pos or not n_neg:
        raise ValueError("auc needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u_stat = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return u_stat / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# data split


@dataclass
class EvalSplit:
    user_ids: list[str]
    item_ids: list[str]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    observed: list[set[int]]
    excluded: int = 0

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


def split_interactions(
    records: Iterable[InteractionRecord],
    item_ids: Sequence[str],
    seed: int = 0,
    test_fraction: float = 0.2,
    valid_fraction: float = 0.1,
) -> EvalSplit:
    """Random 80/20 train/test split of distinct positives; 10% of train held out.

    Interactions with items outside ``item_ids`` are dropped and counted.
    """
    index = {item: i for i, item in enumerate(item_ids)}
    users: dict[str, int] = {}
    pairs = set()
    excluded = 0
    for rec in records:
        i = index.get(rec.item_id)
        if i is None:
            excluded += 1
            continue
        u = users.setdefault(rec.user_id, len(users))
        pairs.add((u, i))
    if not pairs:
        raise DataError("no interactions left after aligning to the item set")
    if excluded:
        log.warning("excluded %d interactions with items outside the embedding table", excluded)
    pairs_arr = np.array(sorted(pairs), dtype=np.int64)
    rng = stream(seed, EVAL_STREAM, 0)
    perm = rng.permutation(len(pairs_arr))
    n_test = int(round(test_fraction * len(perm)))
    test, rest = pairs_arr[perm[:n_test]], pairs_arr[perm[n_test:]]
    n_valid = int(round(valid_fraction * len(rest)))
    valid, train = rest[:n_valid], rest[n_valid:]
    observed = [set() for _ in users]
    for u, i in pairs_arr.tolist():
        observed[u].add(i)
    return EvalSplit(list(users), list(item_ids), train, valid, test, observed, excluded)


def sample_unobserved(observed: set[int], n_items: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``count`` distinct items the user never interacted with."""
    pool = np.setdiff1d(np.arange(n_items), np.fromiter(observed, dtype=np.int64, count=len(observed)))
    if len(pool) <= count:
        return pool
    return rng.choice(pool, size=count, replace=False)


# ---------------------------------------------------------------------------
# downstream models


@dataclass(frozen=True)
class ProtocolConfig:
    dim: int = 32
    epochs: int = 30
    learning_rate: float = 0.01
    batch_size: int = 256
    init_std: float = 0.1
    fine_tune: bool = True
    k: int = 20
    candidates: int = 1000
    ctr_negatives: int = 5
    seed: int = 0


class TwoTowerModel:
    def __init__(self, n_users: int, items: np.ndarray, rng: np.random.Generator, init_std: float, fine_tune=True):
        self.user = Tensor(rng.normal(0.0, init_std, (n_users, items.shape[1])), requires_grad=True, name="user")
        self.item = Tensor(items, requires_grad=fine_tune, name="item")

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.user, self.item) if p.requires_grad]

    def logits(self, users, items) -> Tensor:
        return ad.sum_(ad.gather_rows(self.user, users) * ad.gather_rows(self.item, items), axis=-1)

    def score_items(self, user: int, items: np.ndarray) -> np.ndarray:
        return self.item.data[items] @ self.user.data[user]


class LogisticCTRModel:
    def __init__(self, n_users: int, items: np.ndarray, rng: np.random.Generator, init_std: float, fine_tune=True):
        d = items.shape[1]
        self.user = Tensor(rng.normal(0.0, init_std, (n_users, d)), requires_grad=True, name="user")
        self.item = Tensor(items, requires_grad=fine_tune, name="item")
        # starts out as a plain dot product
        init = np.concatenate([np.zeros(2 * d), np.ones(d)])[:, None]
        self.weight = Tensor(init, requires_grad=True, name="weight")
        self.bias = Tensor(0.0, requires_grad=True, name="bias")

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.user, self.item, self.weight, self.bias) if p.requires_grad]

    def logits(self, users, items) -> Tensor:
        u = ad.gather_rows(self.user, users)
        v = ad.gather_rows(self.item, items)
        out = ad.matmul(ad.concat([u, v, u * v], axis=-1), self.weight)
        return ad.reshape(out, (out.shape[0],)) + self.bias

    def score_items(self, user: int, items: np.ndarray) -> np.ndarray:
        d = self.user.shape[1]
        u = self.user.data[user]
        v = self.item.data[items]
        w = self.weight.data[:, 0]
        return u @ w[:d] + v @ w[d : 2 * d] + (v * u) @ w[2 * d :] + self.bias.item()


def _observed_keys(split: EvalSplit) -> np.ndarray:
    keys = [u * split.n_items + i for u, items in enumerate(split.observed) for i in items]
    return np.sort(np.array(keys, dtype=np.int64))


def _with_negatives(pairs: np.ndarray, split: EvalSplit, rng: np.random.Generator, keys=None):
    """One uniformly drawn unobserved item per pair, by vectorised rejection."""
    keys = _observed_keys(split) if keys is None else keys
    users = pairs[:, 0]
    negs = rng.integers(0, split.n_items, size=len(users))
    pending = np.arange(len(users))
    for _ in range(100):
        probe = users[pending] * split.n_items + negs[pending]
        pos = np.minimum(np.searchsorted(keys, probe), len(keys) - 1)
        pending = pending[keys[pos] == probe]
        if not len(pending):
            break
        negs[pending] = rng.integers(0, split.n_items, size=len(pending))
    for r in pending.tolist():
        # nearly saturated users: fall back to the exact pool
        negs[r] = sample_unobserved(split.observed[users[r]], split.n_items, 1, rng)[0]
    return users, pairs[:, 1], negs


def _pair_loss(model, users, pos, negs) -> Tensor:
    return ad.mean(-ad.log_sigmoid(model.logits(users, pos)) - ad.log_sigmoid(-model.logits(users, negs)))


def train_model(model, split: EvalSplit, cfg: ProtocolConfig, rng: np.random.Generator):
    """Pointwise logistic training; keeps the epoch with the lowest held-out loss."""
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    keys = _observed_keys(split)
    valid = _with_negatives(split.valid, split, rng, keys) if len(split.valid) else None
    best, best_state = math.inf, None
    for _ in range(cfg.epochs):
        users, pos, negs = _with_negatives(split.train, split, rng, keys)
        order = rng.permutation(len(users))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            with Tape() as tape:
                loss = _pair_loss(model, users[idx], pos[idx], negs[idx])
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
        if valid is not None:
            current = _pair_loss(model, *valid).item()
            if current < best:
                best, best_state = current, [p.data.copy() for p in model.parameters()]
    if best_state is not None:
        for p, value in zip(model.parameters(), best_state):
            p.data[...] = value
    return model


def item_table(split: EvalSplit, pretrained: np.ndarray | None, cfg: ProtocolConfig, rng: np.random.Generator):
    """Initial item vectors; pre-trained rows are rescaled to the random-init spread."""
    if pretrained is None:
        return rng.normal(0.0, cfg.init_std, (split.n_items, cfg.dim))
    table = np.asarray(pretrained, dtype=np.float64)
    if table.shape != (split.n_items, cfg.dim):
        raise DataError(f"embedding table {table.shape} does not match {split.n_items} items x dim {cfg.dim}")
    centered = table - table.mean(axis=0)
    return centered * (cfg.init_std / max(centered.std(), 1e-12))


def retrieval_metrics(model, split: EvalSplit, cfg: ProtocolConfig, rng: np.random.Generator) -> dict[str, float]:
    by_user: dict[int, list[int]] = {}
    for u, i in split.test.tolist():
        by_user.setdefault(u, []).append(i)
    recalls, ndcgs = [], []
    for u in sorted(by_user):
        relevant = by_user[u]
        negatives = sample_unobserved(split.observed[u], split.n_items, cfg.candidates, rng)
        candidates = np.concatenate([np.array(relevant, dtype=np.int64), negatives])
        scores = model.score_items(u, candidates)
        ranked = candidates[np.argsort(-scores, kind="stable")].tolist()
        recalls.append(recall_at_k(ranked, relevant, cfg.k))
        ndcgs.append(ndcg_at_k(ranked, relevant, cfg.k))
    return {f"recall@{cfg.k}": float(np.mean(recalls)), f"ndcg@{cfg.k}": float(np.mean(ndcgs))}


def ctr_auc(model, split: EvalSplit, cfg: ProtocolConfig, rng: np.random.Generator) -> float:
    scores, labels = [], []
    for u, i in split.test.tolist():
        negatives = sample_unobserved(split.observed[u], split.n_items, cfg.ctr_negatives, rng)
        s = model.score_items(u, np.concatenate([[i], negatives]).astype(np.int64))
        scores.extend(s.tolist())
        labels.extend([1] + [0] * len(negatives))
    return auc(scores, labels)


@dataclass
class TransferReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def add(self, metric: str, arm: str, value: float) -> None:
        self.rows.append((metric, arm, float(value)))

    def get(self, metric: str, arm: str) -> float:
        for m, a, v in self.rows:
            if m == metric and a == arm:
                return v
        raise KeyError((metric, arm))

    def to_tsv(self) -> str:
        return "metric\tarm\tvalue\n" + "".join(f"{m}\t{a}\t{v!r}\n" for m, a, v in self.rows)


def _run_arm(task: str, split, pretrained, cfg: ProtocolConfig) -> dict[str, float]:
    # both arms share every stream except the item table
    init_rng = stream(cfg.seed, EVAL_STREAM, 1)
    items = item_table(split, pretrained, cfg, stream(cfg.seed, EVAL_STREAM, 2))
    model_cls = TwoTowerModel if task == "rec" else LogisticCTRModel
    model = model_cls(split.n_users, items, init_rng, cfg.init_std, cfg.fine_tune)
    train_model(model, split, cfg, stream(cfg.seed, EVAL_STREAM, 3))
    eval_rng = stream(cfg.seed, EVAL_STREAM, 4)
    if task == "rec":
        return retrieval_metrics(model, split, cfg, eval_rng)
    return {"auc": ctr_auc(model, split, cfg, eval_rng)}


def evaluate_transfer(
    split: EvalSplit,
    pretrained: np.ndarray | None,
    cfg: ProtocolConfig = ProtocolConfig(),
    tasks: Sequence[str] = ("rec", "ctr"),
) -> TransferReport:
    """Train each downstream model twice, from pre-trained and from random item vectors."""
    if pretrained is not None:
        cfg = replace(cfg, dim=np.asarray(pretrained).shape[1])
    report = TransferReport()
    for task in tasks:
        if task not in ("rec", "ctr"):
            raise ValueError(f"unknown task {task!r}")
        arms = [("pretrained", pretrained), ("random", None)] if pretrained is not None else [("random", None)]
        for arm, table in arms:
            for metric, value in _run_arm(task, split, table, cfg).items():
                report.add(metric, arm, value)
    if split.excluded:
        report.add("excluded_interactions", "all", split.excluded)
    return report
