import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphpretrain.errors import DataError
from graphpretrain.evaluation import (
    ProtocolConfig,
    TransferReport,
    _observed_keys,
    _with_negatives,
    auc,
    evaluate_transfer,
    item_table,
    ndcg_at_k,
    recall_at_k,
    sample_unobserved,
    split_interactions,
)
from graphpretrain.graph import InteractionRecord
from graphpretrain.synthetic import block_interactions, two_block_graph


def test_recall_examples():
    ranked = list(range(1000))
    assert recall_at_k(ranked, {0}, 20) == 1.0
    assert recall_at_k(ranked, {20}, 20) == 0.0
    assert recall_at_k(ranked, {3, 500}, 20) == 0.5


def test_ndcg_examples():
    ranked = list(range(30))
    assert ndcg_at_k(ranked, {0}, 20) == 1.0
    assert ndcg_at_k(ranked, {1}, 20) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k(ranked, {25}, 20) == 0.0


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == 0.75


def test_metrics_reject_degenerate_input():
    with pytest.raises(ValueError):
        recall_at_k([1, 2], set(), 20)
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=30, unique=True), st.data())
def test_auc_reversal(scores, data):
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    if len(set(labels)) < 2:
        labels[0], labels[1] = 0, 1
    a = auc(scores, labels)
    assert 0.0 <= a <= 1.0
    assert auc([-s for s in scores], labels) == pytest.approx(1.0 - a, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.permutations(list(range(15))), st.sets(st.integers(0, 14), min_size=1), st.integers(1, 15))
def test_ranking_metrics_in_unit_interval(ranked, relevant, k):
    for metric in (recall_at_k, ndcg_at_k):
        assert 0.0 <= metric(ranked, relevant, k) <= 1.0 + 1e-15


def _records(n_users=40, per_user=6, n_items=30, seed=0):
    rng = np.random.default_rng(seed)
    return [
        InteractionRecord(f"u{u}", f"i{i}")
        for u in range(n_users)
        for i in rng.choice(n_items, size=per_user, replace=False)
    ]


def test_split_partitions_positives():
    recs = _records()
    split = split_interactions(recs, [f"i{i}" for i in range(30)], seed=1)
    parts = [set(map(tuple, a.tolist())) for a in (split.train, split.valid, split.test)]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    every = {(split.user_ids.index(r.user_id), int(r.item_id[1:])) for r in recs}
    assert parts[0] | parts[1] | parts[2] == every
    assert len(parts[2]) == round(0.2 * len(every))
    assert split.excluded == 0


def test_split_excludes_unknown_items():
    recs = _records() + [InteractionRecord("u0", "stranger"), InteractionRecord("u1", "ghost")]
    split = split_interactions(recs, [f"i{i}" for i in range(30)])
    assert split.excluded == 2
    report = evaluate_transfer(split, None, ProtocolConfig(epochs=1, dim=4), tasks=("ctr",))
    assert report.get("excluded_interactions", "all") == 2


def test_split_needs_interactions():
    with pytest.raises(DataError):
        split_interactions([InteractionRecord("u", "x")], ["a"])


def test_candidate_sets_honour_size():
    rng = np.random.default_rng(0)
    observed = {1, 2, 3}
    assert len(sample_unobserved(observed, 2000, 1000, rng)) == 1000
    small = sample_unobserved(observed, 50, 1000, rng)
    assert sorted(small.tolist()) == sorted(set(range(50)) - observed)
    big = sample_unobserved(observed, 2000, 1000, rng)
    assert len(set(big.tolist())) == 1000 and not set(big.tolist()) & observed


def test_training_negatives_are_unobserved():
    split = split_interactions(_records(per_user=20), [f"i{i}" for i in range(30)])
    users, pos, negs = _with_negatives(split.train, split, np.random.default_rng(0), _observed_keys(split))
    assert len(negs) == len(split.train)
    for u, n in zip(users.tolist(), negs.tolist()):
        assert n not in split.observed[u]


def test_random_arm_is_deterministic():
    split = split_interactions(_records(), [f"i{i}" for i in range(30)])
    cfg = ProtocolConfig(epochs=3, dim=8)
    a = evaluate_transfer(split, None, cfg)
    b = evaluate_transfer(split, None, cfg)
    assert a.rows == b.rows
    assert {m for m, _, _ in a.rows} == {"recall@20", "ndcg@20", "auc"}


def test_pretrained_table_is_rescaled():
    split = split_interactions(_records(), [f"i{i}" for i in range(30)])
    table = np.random.default_rng(0).normal(5.0, 9.0, size=(30, 8))
    out = item_table(split, table, ProtocolConfig(dim=8, init_std=0.1), np.random.default_rng(0))
    assert np.allclose(out.mean(0), 0.0, atol=1e-12)
    assert out.std() == pytest.approx(0.1)
    with pytest.raises(DataError):
        item_table(split, table[:, :4], ProtocolConfig(dim=8), np.random.default_rng(0))


def test_downstream_models_learn_dense_signal():
    data = two_block_graph(120, seed=0)
    recs = block_interactions(data.blocks, data.graph.ids, n_users=300, per_user=25, seed=1)
    split = split_interactions(recs, data.graph.ids, seed=0)
    report = evaluate_transfer(split, None, ProtocolConfig(epochs=30, dim=8, learning_rate=0.02))
    assert report.get("auc", "random") > 0.6
    # chance level for recall@20 is about 20 / (relevant + unobserved pool)
    assert report.get("recall@20", "random") > 0.4


def test_report_tsv():
    report = TransferReport()
    report.add("recall@20", "pretrained", 0.25)
    report.add("recall@20", "random", 0.125)
    assert report.to_tsv() == "metric\tarm\tvalue\nrecall@20\tpretrained\t0.25\nrecall@20\trandom\t0.125\n"
    with pytest.raises(KeyError):
        report.get("auc", "random")
