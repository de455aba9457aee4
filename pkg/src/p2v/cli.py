"""Command-line entry point wiring all modules together.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every training
run directory receives the effective config and seed, which is enough to
reproduce its outputs bit-exactly.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import context_sampler, evaluation, ingest, synthetic, trainer
from .errors import P2VError
from .model import load_checkpoint
from .trainer import TrainConfig

log = logging.getLogger(__name__)

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here reserves 2 for
    runtime failures, so usage problems are rerouted to exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise P2VError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise P2VError(f"config {path} must hold a JSON object")
    return data


def _merged_train_config(args, file_cfg):
    """defaults < config file < explicit flags."""
    merged = dict(file_cfg)
    merged.pop("points_per_instance", None)
    flag_map = {
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "alpha": args.alpha,
        "margin_weight": args.margin_weight,
        "code_size": args.code_size,
        "decoder_points": args.decoder_points,
        "mode": args.mode,
        "rng_seed": args.seed,
        "k_close": args.k_close,
        "k_similar": args.k_similar,
        "grid_steps": args.grid_steps,
        "refine_tol": args.refine_tol,
        "grad_clip": args.grad_clip,
        "checkpoint_every": args.checkpoint_every,
        "workers": args.workers,
        "dtype": args.dtype,
        "reconstruct_all": args.reconstruct_all,
    }
    for key, value in flag_map.items():
        if value is not None:
            merged[key] = value
    return TrainConfig.from_dict(merged)


def _points_per_instance(args, file_cfg):
    if args.points_per_instance is not None:
        return args.points_per_instance
    return int(file_cfg.get("points_per_instance", 1000))


def _cache_dir(args, data_dir):
    if getattr(args, "cache_dir", None):
        return Path(args.cache_dir)
    env = os.environ.get("P2V_CACHE_DIR")
    if env:
        return Path(env)
    return Path(data_dir) / ".p2v_cache"


def _resolve_id(rows, wanted):
    """Accept 'scene/instance' or a bare instance id when unambiguous."""
    full = [f"{r['scene_id']}/{r['instance_id']}" for r in rows]
    if wanted in full:
        return full.index(wanted)
    hits = [i for i, r in enumerate(rows) if r["instance_id"] == wanted]
    if not hits:
        raise P2VError(f"unknown id {wanted!r}")
    if len(hits) > 1:
        raise P2VError(f"id {wanted!r} is ambiguous; qualify as scene_id/{wanted}")
    return hits[0]


def _write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _print_json(payload):
    print(json.dumps(payload, sort_keys=True, indent=2))


def cmd_make_synthetic(args):
    file_cfg = _load_config_file(args.config)
    spec_dict = dict(file_cfg.get("synthetic", {}))
    if args.scenes is not None:
        spec_dict["n_scenes"] = args.scenes
    if args.instances is not None:
        spec_dict["instances_per_scene"] = args.instances
    if args.storage is not None:
        spec_dict["storage"] = args.storage
    if args.points is not None:
        spec_dict["n_points"] = args.points
    spec = synthetic.SyntheticSpec.from_dict(spec_dict)
    dirs = synthetic.generate_synthetic_scenes(spec, args.out, args.seed or 0)
    print(f"wrote {len(dirs)} scenes under {args.out}")
    return 0


def cmd_ingest(args):
    file_cfg = _load_config_file(args.config)
    ppi = _points_per_instance(args, file_cfg)
    seed = args.seed if args.seed is not None else 0
    dataset = ingest.load_dataset(args.data, ppi, seed,
                                  n_val=args.n_val, n_test=args.n_test)
    ingest.save_dataset(dataset, args.out)
    counts = {name: len(dataset.subset(name)) for name in ingest.SPLIT_NAMES}
    print(f"ingested {len(dataset.instances)} instances from "
          f"{len(dataset.scene_ids())} scenes into {args.out} "
          f"(train/val/test = {counts['train']}/{counts['validation']}/{counts['test']})")
    return 0


def cmd_precompute_sim(args):
    file_cfg = _load_config_file(args.config)
    cfg = _merged_train_config(args, file_cfg)
    ppi = _points_per_instance(args, file_cfg)
    dataset = ingest.load_dataset(args.data, ppi, cfg.rng_seed)
    cache = context_sampler.ensure_cache(
        dataset.subset("train"), _cache_dir(args, args.data),
        k_close=cfg.k_close, k_similar=cfg.k_similar,
        grid_steps=cfg.grid_steps, refine_tol=cfg.refine_tol, workers=cfg.workers)
    print(f"similarity cache ready for {len(cache)} training instances "
          f"(fingerprint {cache.fingerprint[:16]})")
    return 0


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    cfg = _merged_train_config(args, file_cfg)
    ppi = _points_per_instance(args, file_cfg)
    dataset = ingest.load_dataset(args.data, ppi, cfg.rng_seed)
    trainer.train(dataset, cfg, args.run_dir, cache_dir=_cache_dir(args, args.data))
    print(f"trained {cfg.mode} for {cfg.epochs} epochs; outputs in {args.run_dir}")
    return 0


def cmd_embed(args):
    file_cfg = _load_config_file(args.config)
    ppi = _points_per_instance(args, file_cfg)
    model, header = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else header.get("rng_seed", 0)
    dataset = ingest.load_dataset(args.data, ppi, seed)
    embedded = trainer.embed_dataset(model, dataset, args.split)
    evaluation.save_embeddings(args.out, embedded)
    print(f"wrote {len(embedded)} embeddings to {args.out}")
    return 0


def _cluster_payload(rows, vectors, seed, restarts):
    labels = [r["label"] for r in rows]
    report = evaluation.ari_km_report(vectors, labels, seed, restarts=restarts)
    return {
        "k": report.k,
        "ari": report.ari,
        "assignments": [
            {"scene_id": r["scene_id"], "instance_id": r["instance_id"], "cluster": c}
            for r, c in zip(rows, report.assignments)
        ],
    }


def cmd_eval_cluster(args):
    rows, vectors = evaluation.load_embeddings(args.embeddings)
    payload = _cluster_payload(rows, vectors, args.seed or 0, args.restarts)
    if args.out:
        _write_json(args.out, payload)
    _print_json({k: payload[k] for k in ("k", "ari")})
    return 0


def _distances_payload(rows, vectors, class_subset=None):
    labels = [r["label"] for r in rows]
    report = evaluation.cosine_distance_matrix(vectors, labels, class_subset)
    matrix = [[None if np.isnan(x) else float(x) for x in row] for row in report.matrix]
    return {
        "classes": report.classes,
        "matrix": matrix,
        "intra_mean": report.intra_mean,
        "inter_mean": report.inter_mean,
    }


def cmd_eval_distances(args):
    rows, vectors = evaluation.load_embeddings(args.embeddings)
    subset = args.classes.split(",") if args.classes else None
    payload = _distances_payload(rows, vectors, subset)
    if args.out:
        _write_json(args.out, payload)
    _print_json(payload)
    return 0


def cmd_eval_recon(args):
    file_cfg = _load_config_file(args.config)
    ppi = _points_per_instance(args, file_cfg)
    model, header = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else header.get("rng_seed", 0)
    dataset = ingest.load_dataset(args.data, ppi, seed)
    instances = dataset.subset(args.split)
    payload = {"split": args.split, "n_instances": len(instances),
               "acd": evaluation.acd(model, instances)}
    if args.out:
        _write_json(args.out, payload)
    _print_json(payload)
    return 0


def cmd_interpolate(args):
    rows, vectors = evaluation.load_embeddings(args.embeddings)
    model, _ = load_checkpoint(args.checkpoint)
    i_a = _resolve_id(rows, args.from_id)
    i_b = _resolve_id(rows, args.to_id)
    path = evaluation.interpolate(model, vectors[i_a], vectors[i_b], args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for step, (t, cloud) in enumerate(path):
        entry = {"step": step, "t": t}
        if cloud is None:
            entry["skipped"] = "undefined midpoint (antipodal embeddings)"
        else:
            name = f"step_{step:03d}.p2vc"
            ingest.write_points_file(out / name, cloud)
            entry["points_file"] = name
        index.append(entry)
    _write_json(out / "index.json", {
        "from": f"{rows[i_a]['scene_id']}/{rows[i_a]['instance_id']}",
        "to": f"{rows[i_b]['scene_id']}/{rows[i_b]['instance_id']}",
        "steps": index,
    })
    print(f"wrote {sum(1 for e in index if 'points_file' in e)} interpolation steps to {out}")
    return 0


def cmd_query(args):
    rows, vectors = evaluation.load_embeddings(args.embeddings)
    idx = _resolve_id(rows, args.id)
    ids = [f"{r['scene_id']}/{r['instance_id']}" for r in rows]
    ranked = evaluation.query_similar(ids, vectors, ids[idx], args.top_k)
    for rank, (iid, dist) in enumerate(ranked, start=1):
        print(f"{rank}\t{iid}\t{dist:.6f}")
    return 0


def cmd_report(args):
    file_cfg = _load_config_file(args.config)
    ppi = _points_per_instance(args, file_cfg)
    model, header = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else header.get("rng_seed", 0)
    dataset = ingest.load_dataset(args.data, ppi, seed)
    instances = dataset.subset(args.split)
    if not instances:
        raise P2VError(f"split {args.split!r} has no instances")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    embedded = evaluation.embed_records(model, instances)
    evaluation.save_embeddings(out / "embeddings.jsonl", embedded)
    rows, vectors = evaluation.load_embeddings(out / "embeddings.jsonl")

    cluster = _cluster_payload(rows, vectors, seed, args.restarts)
    _write_json(out / "cluster.json", cluster)
    distances = _distances_payload(rows, vectors)
    _write_json(out / "distances.json", distances)
    recon = {"split": args.split, "n_instances": len(instances),
             "acd": evaluation.acd(model, instances)}
    _write_json(out / "recon.json", recon)

    pca = evaluation.pca_project(vectors, 2)
    with open(out / "pca_scatter.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "instance_id", "label", "pc1", "pc2"])
        for r, xy in zip(rows, pca.projected):
            writer.writerow([r["scene_id"], r["instance_id"], r["label"],
                             repr(float(xy[0])), repr(float(xy[1]))])
    heat = evaluation.heatmap_data(vectors)
    with open(out / "heatmap_angles.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_start_rad", "bin_end_rad", "count"])
        for i, count in enumerate(heat["angle_counts"]):
            writer.writerow([repr(float(heat["angle_edges"][i])),
                             repr(float(heat["angle_edges"][i + 1])), int(count)])
    with open(out / "heatmap_grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in heat["grid"]:
            writer.writerow([int(x) for x in row])

    summary = {
        "split": args.split,
        "n_instances": len(instances),
        "checkpoint": str(args.checkpoint),
        "cluster": {"k": cluster["k"], "ari": cluster["ari"]},
        "distances": distances,
        "recon": recon,
        "pca": {"explained_variance_ratio": [float(x) for x in pca.explained_variance_ratio],
                "effective_dim": pca.effective_dim},
        "files": ["embeddings.jsonl", "cluster.json", "distances.json", "recon.json",
                  "pca_scatter.csv", "heatmap_angles.csv", "heatmap_grid.csv"],
    }
    _write_json(out / "report.json", summary)
    _print_json({"ari": cluster["ari"], "acd": recon["acd"],
                 "intra_mean": distances["intra_mean"], "inter_mean": distances["inter_mean"]})
    return 0


def _add_common(p, config=True):
    p.add_argument("--seed", type=int, default=None, help="rng seed")
    if config:
        p.add_argument("--config", default=None, help="JSON config file; flags override")


def _add_train_flags(p):
    p.add_argument("--learning-rate", type=float, dest="learning_rate", default=None)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="margin parameter")
    p.add_argument("--margin-weight", "--lambda", type=float, dest="margin_weight",
                   default=None, help="margin-to-reconstruction ratio")
    p.add_argument("--code-size", type=int, dest="code_size", default=None)
    p.add_argument("--decoder-points", type=int, dest="decoder_points", default=None)
    p.add_argument("--mode", choices=trainer.MODES, default=None)
    p.add_argument("--k-close", type=int, dest="k_close", default=None)
    p.add_argument("--k-similar", type=int, dest="k_similar", default=None)
    p.add_argument("--grid-steps", type=int, dest="grid_steps", default=None)
    p.add_argument("--refine-tol", type=float, dest="refine_tol", default=None)
    p.add_argument("--grad-clip", type=float, dest="grad_clip", default=None)
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--reconstruct-all", action="store_true", dest="reconstruct_all",
                   default=None, help="reconstruct all four quadruple members")
    p.add_argument("--points-per-instance", type=int, dest="points_per_instance", default=None)
    p.add_argument("--cache-dir", dest="cache_dir", default=None,
                   help="similarity cache location (or set P2V_CACHE_DIR)")


def build_parser():
    parser = Parser(prog="p2v", description="point cloud instance embeddings")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("make-synthetic", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--storage", choices=("points", "mesh"), default=None)
    p.add_argument("--points", type=int, default=None, help="stored points per instance")
    _add_common(p)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("ingest", help="normalize a dataset and assign splits")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points-per-instance", type=int, dest="points_per_instance", default=None)
    p.add_argument("--n-val", type=int, dest="n_val", default=1)
    p.add_argument("--n-test", type=int, dest="n_test", default=1)
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("precompute-sim", help="build the similarity cache")
    p.add_argument("--data", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_precompute_sim)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir", dest="run_dir", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a dataset split with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all", choices=("train", "validation", "test", "all"))
    p.add_argument("--points-per-instance", type=int, dest="points_per_instance", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval-cluster", help="k-means + adjusted Rand index")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_cluster)

    p = sub.add_parser("eval-distances", help="averaged cosine distance table")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--classes", default=None, help="comma-separated class subset")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_distances)

    p = sub.add_parser("eval-recon", help="averaged chamfer reconstruction distance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test", "all"))
    p.add_argument("--points-per-instance", type=int, dest="points_per_instance", default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("interpolate", help="decode the path between two embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--from", dest="from_id", required=True)
    p.add_argument("--to", dest="to_id", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("query", help="nearest instances to a query embedding")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--top-k", type=int, dest="top_k", default=5)
    _add_common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("report", help="bundle every evaluation artifact")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test", "all"))
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--points-per-instance", type=int, dest="points_per_instance", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return USAGE_EXIT
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (P2VError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
