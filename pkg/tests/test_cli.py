import numpy as np
import pytest

from graphpretrain.cli import build_parser, main
from graphpretrain.config import RunConfig, parse_config_text
from graphpretrain.graph import read_feature_file, read_graph, write_feature_file, write_graph

from conftest import toy_graph, toy_store

TINY = ["--dim", "8", "--depth", "2", "--sizes", "3,2", "--context-size", "3", "--batch-size", "4",
        "--neg-count", "2"]  # fmt: skip


@pytest.fixture
def dataset(tmp_path):
    g, store = toy_graph(), toy_store()
    write_graph(g, tmp_path / "graph.tsv")
    paths = []
    for name, matrix in zip(store.names, store.matrices):
        write_feature_file(tmp_path / f"{name}.bin", g.ids, matrix)
        paths.append(str(tmp_path / f"{name}.bin"))
    return tmp_path, str(tmp_path / "graph.tsv"), paths


def pretrain(root, graph, features, *extra, log="log.tsv", ckpt="model.ckpt"):
    argv = ["pretrain", "--graph", graph, "--features", *features, "--out-checkpoint", str(root / ckpt),
            "--log", str(root / log), *TINY, *extra]  # fmt: skip
    return main(argv)


def read_log(path):
    header, rows = [], []
    for line in path.read_text().splitlines():
        (header if line.startswith("# ") else rows).append(line)
    return header, rows


def test_help_documents_formats(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for word in ("build-graph", "sample", "pretrain", "export-embeddings", "evaluate-rec", "evaluate-ctr", "MGFEAT1"):
        assert word in out


def test_every_subcommand_has_help():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, subparser in sub.choices.items():
        for action in subparser._actions:
            if action.dest != "help":
                assert action.help or action.option_strings == [], (name, action.dest)


def test_build_graph_from_interactions_and_tags(tmp_path):
    (tmp_path / "x.tsv").write_text("u1\ti1\nu1\ti2\nu2\ti1\nu2\ti2\nu3\ti2\nu3\ti3\n")
    assert main(["build-graph", "--interactions", str(tmp_path / "x.tsv"), "--min-edge-weight", "2",
                 "--out", str(tmp_path / "g.tsv")]) == 0  # fmt: skip
    assert read_graph(tmp_path / "g.tsv").edge_set() == {("i1", "i2", 2.0)}
    (tmp_path / "t.tsv").write_text("m1\tt1\nm1\tt2\nm2\tt1\nm3\tt2\nm3\tt3\n")
    assert main(["build-graph", "--tags", str(tmp_path / "t.tsv"), "--out", str(tmp_path / "h.tsv")]) == 0
    assert read_graph(tmp_path / "h.tsv").edge_set() == {("m1", "m2", 1.0), ("m1", "m3", 1.0)}


def test_sample_prints_ranking(dataset, capsys):
    _, graph, _ = dataset
    assert main(["sample", "--graph", graph, "--target", "n0", "--depth", "2", "--sizes", "3,2", "--context-size", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "rank\titem_id\tscore\tselected"
    rows = [line.split("\t") for line in lines[1:]]
    assert [r[3] for r in rows[:2]] == ["yes", "yes"] and all(r[3] == "no" for r in rows[2:])
    assert "n0" not in [r[1] for r in rows]
    assert [int(r[2]) for r in rows] == sorted((int(r[2]) for r in rows), reverse=True)


def test_pretrain_log_header_reproduces_run(dataset):
    root, graph, features = dataset
    assert pretrain(root, graph, features, "--steps", "3", "--seed", "4", "--beta", "0.8") == 0
    header, rows = read_log(root / "log.tsv")
    cfg = RunConfig(**parse_config_text("\n".join(line[2:] for line in header)))
    assert (cfg.seed, cfg.beta, cfg.steps, cfg.dim) == (4, 0.8, 3, 8)
    assert rows[0] == "step\tedge_loss\tfeature_loss\ttotal"
    assert [r.split("\t")[0] for r in rows[1:]] == ["1", "2", "3"]

    (root / "replay.conf").write_text(cfg.to_text())
    argv = ["pretrain", "--graph", graph, "--features", *features, "--config", str(root / "replay.conf"),
            "--out-checkpoint", str(root / "b.ckpt"), "--log", str(root / "b.tsv")]  # fmt: skip
    assert main(argv) == 0
    assert read_log(root / "b.tsv") == (header, rows)


def test_resume_continues_the_same_curve(dataset):
    root, graph, features = dataset
    assert pretrain(root, graph, features, "--steps", "4", log="full.tsv", ckpt="full.ckpt") == 0
    assert pretrain(root, graph, features, "--steps", "2", log="a.tsv", ckpt="a.ckpt") == 0
    assert pretrain(root, graph, features, "--steps", "4", "--resume", str(root / "a.ckpt"), log="b.tsv", ckpt="b.ckpt") == 0
    full = read_log(root / "full.tsv")[1]
    assert read_log(root / "a.tsv")[1] + read_log(root / "b.tsv")[1][1:] == full


def test_export_and_evaluate(dataset, capsys):
    root, graph, features = dataset
    assert pretrain(root, graph, features, "--steps", "2") == 0
    out = root / "emb.bin"
    assert main(["export-embeddings", "--checkpoint", str(root / "model.ckpt"), "--out", str(out)]) == 0
    ids, table = read_feature_file(out)
    tsv_ids, tsv_table = read_feature_file(str(out) + ".tsv")
    assert ids == tsv_ids == read_graph(graph).ids
    assert table.shape == (6, 8)
    assert np.allclose(table, tsv_table, rtol=1e-6, atol=1e-7)

    again = root / "again.bin"
    assert main(["export-embeddings", "--checkpoint", str(root / "model.ckpt"), "--out", str(again), "--threads", "2"]) == 0
    assert again.read_bytes() == out.read_bytes()

    rng = np.random.default_rng(0)
    lines = [f"u{u}\tn{i}" for u in range(30) for i in rng.choice(6, size=3, replace=False)]
    (root / "inter.tsv").write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    report = root / "rep.tsv"
    assert main(["evaluate-rec", "--embeddings", str(out), "--interactions", str(root / "inter.tsv"),
                 "--report", str(report), "--epochs", "2"]) == 0  # fmt: skip
    rows = [line.split("\t") for line in report.read_text().splitlines()]
    assert rows[0] == ["metric", "arm", "value"]
    assert {(m, a) for m, a, _ in rows[1:]} == {
        ("recall@20", "pretrained"), ("recall@20", "random"), ("ndcg@20", "pretrained"), ("ndcg@20", "random")
    }
    assert main(["evaluate-ctr", "--embeddings", str(out), "--interactions", str(root / "inter.tsv"), "--epochs", "2"]) == 0
    assert "auc\tpretrained" in capsys.readouterr().out


def test_make_synthetic(tmp_path):
    assert main(["make-synthetic", "--out-dir", str(tmp_path), "--nodes", "40", "--users", "10"]) == 0
    g = read_graph(tmp_path / "graph.tsv")
    assert g.node_count == 40
    ids, matrix = read_feature_file(tmp_path / "modality0.mgfeat")
    assert ids == g.ids and matrix.shape == (40, 16)


def test_exit_codes(dataset):
    root, graph, features = dataset
    assert pretrain(root, graph, features, "--beta", "1.5") == 2
    (root / "bad.conf").write_text("dropout = 0.3\n")
    assert pretrain(root, graph, features, "--config", str(root / "bad.conf")) == 2
    assert pretrain(root, str(root / "missing.tsv"), features) == 3
    (root / "short.tsv").write_text("n0\t1.0\nn1\t2.0\n")
    assert pretrain(root, graph, [str(root / "short.tsv")]) == 3
    assert main(["sample", "--graph", graph, "--target", "nobody"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--graph", graph])
    assert exc.value.code == 2


def test_numerical_fault_exit_code(dataset):
    root, graph, _ = dataset
    g = read_graph(graph)
    # finite inputs whose squared reconstruction error overflows
    (root / "huge.tsv").write_text("".join(f"{item}\t1e300\t-1e300\n" for item in g.ids))
    with np.errstate(all="ignore"):
        code = pretrain(root, graph, [str(root / "huge.tsv")], "--steps", "2")
    assert code == 4
    # the checkpoint is still written, holding the last finite parameters
    assert (root / "model.ckpt").exists()


def test_drop_missing(dataset):
    root, graph, features = dataset
    g = read_graph(graph)
    partial = root / "partial.tsv"
    rows = toy_store().matrices[0].tolist()
    partial.write_text("".join(f"{item}\t" + "\t".join(map(repr, row)) + "\n" for item, row in zip(g.ids[:5], rows)))
    assert pretrain(root, graph, [str(partial)], "--steps", "1") == 3
    assert pretrain(root, graph, [str(partial)], "--steps", "1", "--drop-missing") == 0
