"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical fault.

File formats
  interactions  TSV: user_id, item_id[, timestamp]; '#' lines are comments
  tags          TSV: item_id, tag
  graph         TSV edge list 'item_a item_b weight' + '<file>.nodes.tsv' (index, item_id)
  features      binary 'MGFEAT1\\0', u64 rows, u64 dim, float32 rows (little-endian)
                + '<file>.index.tsv' (row, item_id); or TSV: item_id then values
  checkpoint    binary 'MGCKPT1\\0' (parameters + Adam state + run metadata)
  config        flat 'key = value' lines; see graphpretrain.config for keys
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import load_checkpoint, restore_optimizer, save_checkpoint
from .errors import GraphPretrainError
from .evaluation import ProtocolConfig, evaluate_transfer, split_interactions
from .graph import (
    build_graph_from_interactions,
    build_graph_from_tags,
    load_features,
    read_feature_file,
    read_graph,
    read_interactions,
    read_tags,
    restrict_to_features,
    write_feature_file,
    write_feature_tsv,
    write_graph,
)
from .model import ModelConfig, ModelParams
from .pretrain import Pretrainer, export_embeddings
from .sampling import MCNSampler, SamplerConfig, stream, CONTEXT_STREAM
from .synthetic import block_interactions, two_block_graph

log = logging.getLogger("graphpretrain")


def _sizes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated counts, got {text!r}") from None


def cmd_build_graph(args) -> None:
    if args.interactions:
        graph = build_graph_from_interactions(read_interactions(args.interactions), args.min_edge_weight)
    else:
        graph = build_graph_from_tags(read_tags(args.tags))
    if args.features:
        graph = restrict_to_features(graph, args.features)
    write_graph(graph, args.out)
    log.info("wrote %s (%d nodes, %d edges)", args.out, graph.node_count, graph.edge_count)


def cmd_sample(args) -> None:
    graph = read_graph(args.graph)
    if args.target not in graph.index:
        raise config_mod.ConfigError(f"unknown target item {args.target!r}")
    cfg = SamplerConfig(args.depth, args.sizes, args.context_size, args.seed)
    sampler = MCNSampler(graph, cfg)
    h = graph.index[args.target]
    nodes, scores = sampler.score(h, stream(cfg.seed, CONTEXT_STREAM, 0, h))
    order = np.lexsort((nodes, -scores))
    out = sys.stdout
    out.write("rank\titem_id\tscore\tselected\n")
    for rank, j in enumerate(order.tolist(), 1):
        selected = "yes" if rank <= cfg.context_size else "no"
        out.write(f"{rank}\t{graph.ids[nodes[j]]}\t{scores[j]}\t{selected}\n")


def _config_overrides(args) -> dict:
    keys = ["dim", "depth", "sizes", "context_size", "layers", "beta", "lam", "neg_count",
            "learning_rate", "batch_size", "steps", "seed", "threads"]  # fmt: skip
    out = {k: getattr(args, k) for k in keys}
    out["clip_grad"] = True if args.clip_grad else None
    return out


def _load_inputs(graph_path, feature_paths, drop_missing: bool):
    graph = read_graph(graph_path)
    if drop_missing:
        graph = restrict_to_features(graph, feature_paths)
    store = load_features(graph, feature_paths, strict=not drop_missing)
    return graph, store


def cmd_pretrain(args) -> None:
    cfg = config_mod.parse_config(args.config, _config_overrides(args))
    graph, store = _load_inputs(args.graph, args.features, args.drop_missing)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        for key, value in cfg.items():
            log_fh.write(f"# {key} = {value}\n")
        log_fh.write("step\tedge_loss\tfeature_loss\ttotal\n")
        trainer = Pretrainer(graph, store, cfg)
        if args.resume:
            ckpt = load_checkpoint(args.resume)
            trainer.params.load_state(ckpt.params)
            trainer.optimizer = restore_optimizer(ckpt, trainer.params.named_parameters(), cfg.clip_norm)
            trainer.step_count = int(ckpt.meta.get("steps_done", ckpt.adam_step))

        def report(step, losses):
            log_fh.write(f"{step}\t{losses.edge!r}\t{losses.feature!r}\t{losses.total!r}\n")

        try:
            trainer.run(max(cfg.steps - trainer.step_count, 0), callback=report)
        finally:
            meta = {
                "run_config": dict(cfg.items()),
                "model_config": trainer.params.config.to_dict(),
                "graph": str(Path(args.graph).resolve()),
                "features": [str(Path(f).resolve()) for f in args.features],
                "drop_missing": bool(args.drop_missing),
                "steps_done": trainer.step_count,
            }
            save_checkpoint(args.out_checkpoint, trainer.params.named_parameters(), trainer.optimizer, meta)
    finally:
        if log_fh is not sys.stdout:
            log_fh.close()


def load_trained(checkpoint_path, graph_path=None, feature_paths=None):
    """Rebuild graph, features, parameters and sampler config from a checkpoint."""
    ckpt = load_checkpoint(checkpoint_path)
    meta = ckpt.meta
    cfg = config_mod.parse_config(None, meta["run_config"])
    graph, store = _load_inputs(graph_path or meta["graph"], feature_paths or meta["features"], meta["drop_missing"])
    mc = meta["model_config"]
    params = ModelParams.init(ModelConfig(**mc), np.random.default_rng(0))
    params.load_state(ckpt.params)
    return ckpt, cfg, graph, store, params


def cmd_export(args) -> None:
    _, cfg, graph, store, params = load_trained(args.checkpoint, args.graph, args.features)
    table = export_embeddings(graph, store, params, MCNSampler(graph, cfg.sampler_config()), threads=args.threads)
    write_feature_file(args.out, graph.ids, table)
    write_feature_tsv(str(args.out) + ".tsv", graph.ids, table)
    log.info("wrote %d x %d embeddings to %s", *table.shape, args.out)


def _evaluate(args, task: str) -> None:
    records = list(read_interactions(args.interactions))
    if args.embeddings:
        ids, table = read_feature_file(args.embeddings)
    else:
        ids = sorted({r.item_id for r in records})
        table = None
    split = split_interactions(records, ids, seed=args.seed)
    proto = ProtocolConfig(dim=args.dim, epochs=args.epochs, learning_rate=args.learning_rate, seed=args.seed)
    report = evaluate_transfer(split, table, proto, tasks=(task,))
    text = report.to_tsv()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_make_synthetic(args) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = two_block_graph(args.nodes, seed=args.seed)
    write_graph(data.graph, out / "graph.tsv")
    for name, matrix in zip(data.store.names, data.store.matrices):
        write_feature_file(out / f"{name}.mgfeat", data.graph.ids, matrix)
    records = block_interactions(data.blocks, data.graph.ids, n_users=args.users, seed=args.seed + 1)
    with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
        fh.write("# user_id\titem_id\n")
        for r in records:
            fh.write(f"{r.user_id}\t{r.item_id}\n")
    with open(out / "blocks.tsv", "w", encoding="utf-8") as fh:
        for item, b in zip(data.graph.ids, data.blocks.tolist()):
            fh.write(f"{item}\t{b}\n")
    log.info("wrote synthetic two-block data to %s", out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphpretrain",
        description="Multimodal item-graph pre-training and transfer evaluation.",
        epilog=__doc__.split("\n", 2)[2],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="build an item graph from interactions or tags")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--interactions", help="interactions TSV (items co-reviewed by a user)")
    src.add_argument("--tags", help="tags TSV (items sharing a tag)")
    p.add_argument("--min-edge-weight", type=int, default=1, help="drop edges below this weight (default 1)")
    p.add_argument("--features", nargs="*", help="drop items missing from these feature files")
    p.add_argument("--out", required=True, help="output graph TSV")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("sample", help="print the contextual-neighbour ranking of one item")
    p.add_argument("--graph", required=True, help="graph TSV (edge list with .nodes.tsv sidecar)")
    p.add_argument("--target", required=True, help="external item id")
    p.add_argument("--depth", type=int, default=3, help="sampling depth K (default 3)")
    p.add_argument("--sizes", type=_sizes, default=(16, 8, 4), help="n1,n2,... (default 16,8,4)")
    p.add_argument("--context-size", type=int, default=10, help="contextual neighbours kept (default 10)")
    p.add_argument("--seed", type=int, default=0, help="sampler seed (default 0)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pretrain", help="pre-train the encoder and write a checkpoint")
    p.add_argument("--graph", required=True, help="graph TSV (edge list with .nodes.tsv sidecar)")
    p.add_argument("--features", required=True, nargs="+", help="one feature file per modality")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out-checkpoint", required=True, help="checkpoint path, written even if training stops on a fault")
    p.add_argument("--log", help="training log TSV (default stdout)")
    p.add_argument("--drop-missing", action="store_true", help="drop graph items without features")
    p.add_argument("--resume", help="continue from this checkpoint up to --steps total")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--dim", type=int, help="latent width d_0 (default 128)")
    p.add_argument("--depth", type=int, help="sampling depth K (default 3)")
    p.add_argument("--sizes", type=_sizes, help="per-step sampling sizes n1,n2,... (default 16,8,4)")
    p.add_argument("--context-size", type=int, help="contextual neighbours S (default 10)")
    p.add_argument("--layers", type=int, help="encoder layers L (default 2)")
    p.add_argument("--beta", type=float, help="diversity-attention weight in [0, 1] (default 0.5)")
    p.add_argument("--lambda", dest="lam", type=float, help="feature-reconstruction loss weight (default 1.0)")
    p.add_argument("--neg-count", type=int, help="negatives per positive pair (default 5)")
    p.add_argument("--learning-rate", type=float, help="Adam step size (default 0.001)")
    p.add_argument("--batch-size", type=int, help="targets per step (default 32)")
    p.add_argument("--steps", type=int, help="total optimisation steps (default 1000)")
    p.add_argument("--clip-grad", action="store_true", help="clip global gradient norm at 5.0")
    p.add_argument("--threads", type=int, help="context-sampling workers (default 1)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("export-embeddings", help="encode every item with a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by pretrain")
    p.add_argument("--out", required=True, help="MGFEAT1 output; a TSV copy goes to <out>.tsv")
    p.add_argument("--graph", help="override the graph recorded in the checkpoint")
    p.add_argument("--features", nargs="+", help="override the feature files recorded in the checkpoint")
    p.add_argument("--threads", type=int, default=1, help="context-sampling workers; output does not depend on it (default 1)")
    p.set_defaults(func=cmd_export)

    for name, task in (("evaluate-rec", "rec"), ("evaluate-ctr", "ctr")):
        p = sub.add_parser(name, help=f"{task} transfer: pre-trained vs random item init")
        p.add_argument("--interactions", required=True, help="interactions TSV (user_id, item_id[, timestamp])")
        p.add_argument("--embeddings", help="feature file of pre-trained item vectors")
        p.add_argument("--seed", type=int, default=0, help="split, initialisation and sampling seed (default 0)")
        p.add_argument("--report", help="TSV report (metric, arm, value)")
        p.add_argument("--dim", type=int, default=32, help="width when no embeddings are given")
        p.add_argument("--epochs", type=int, default=30, help="training epochs; the best held-out epoch is kept (default 30)")
        p.add_argument("--learning-rate", type=float, default=0.01, help="Adam step size (default 0.01)")
        p.set_defaults(func=lambda a, t=task: _evaluate(a, t))

    p = sub.add_parser("make-synthetic", help="write a two-block demo dataset")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--nodes", type=int, default=500, help="item count (default 500)")
    p.add_argument("--users", type=int, default=300, help="synthetic users (default 300)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except GraphPretrainError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 3
    except KeyError as exc:
        log.error("checkpoint metadata is missing %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
