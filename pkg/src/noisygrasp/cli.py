"""Command-line entry points.

Subcommands: ``generate`` (synthetic dataset), ``collect`` (agent-driven
episodes), ``train`` (one or both stages), ``eval`` (held-out binary
accuracy), ``report`` (accuracy grid), ``viz-noise`` (correction-field
dump). Global flags: ``--seed``, ``--config`` (flat key/value file with
``world.``/``model.``/``train.``/``collect.`` prefixes), and
``--deterministic``.

Input datasets are read-only by contract: commands that read one re-verify
its manifest hashes afterwards and fail loudly if anything changed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .collector import CollectionConfig, collect_records
from .config import apply_config, load_config
from .errors import NoisyGraspError
from .model import ModelConfig, load_checkpoint
from .persistence import verify_dataset, write_records
from .reporting import emit_noise_field_plot, report_tables
from .simworld import WorldConfig, generate_dataset, make_world
from .training import (
    PreparedDataset,
    TrainConfig,
    evaluate_binary,
    train_model,
)


def _load_mapping(args) -> dict:
    return load_config(args.config) if args.config else {}


def _world_config(args, mapping: dict) -> WorldConfig:
    cfg = apply_config(WorldConfig(), mapping, prefix="world")
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _train_config(args, mapping: dict) -> TrainConfig:
    cfg = apply_config(TrainConfig(), mapping, prefix="train")
    import dataclasses

    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "deterministic", False):
        updates["deterministic"] = True
    return dataclasses.replace(cfg, **updates) if updates else cfg


def cmd_generate(args) -> int:
    mapping = _load_mapping(args)
    world_cfg = _world_config(args, mapping)
    manifest = generate_dataset(world_cfg, args.n, args.out, split=args.split)
    print(f"wrote {manifest.record_count} records to {args.out}")
    print(f"positive rate {manifest.stats['positive_rate']:.3f}, "
          f"flipped fraction {manifest.stats['flipped_fraction']:.3f}")
    return 0


def cmd_collect(args) -> int:
    mapping = _load_mapping(args)
    world_cfg = _world_config(args, mapping)
    coll_cfg = apply_config(CollectionConfig(), mapping, prefix="collect")
    seed = args.seed if args.seed is not None else world_cfg.seed

    policy = None
    if args.policy and args.policy != "random":
        if not args.policy.startswith("model:"):
            raise NoisyGraspError(
                f"unknown policy {args.policy!r}; use 'random' or 'model:<checkpoint>'"
            )
        from .collector import ModelPolicy

        model, _ = load_checkpoint(args.policy.split(":", 1)[1])
        policy = ModelPolicy(model)

    worlds = (make_world(world_cfg, i) for i in range(args.episodes))
    records, results = collect_records(worlds, coll_cfg, seed, policy=policy)
    exits = {}
    for r in results:
        exits[r.exit_reason] = exits.get(r.exit_reason, 0) + 1
    manifest = write_records(args.out, records, world_cfg, split=args.split)
    print(f"{args.episodes} episodes, {manifest.record_count} records -> {args.out}")
    print(f"exit reasons: {json.dumps(exits, sort_keys=True)}")
    return 0


def _model_config_for_dataset(mapping: dict, manifest) -> ModelConfig:
    """Model defaults follow the dataset geometry; model.* keys override."""
    import dataclasses

    base = ModelConfig()
    wc = manifest.world_config
    base = dataclasses.replace(
        base,
        patch_size=manifest.patch_size,
        scene_size=manifest.scene_size,
        n_robots=int(wc.get("n_robots", max(manifest.robot_ids) + 1)),
        patch_d=float(wc.get("patch_d", base.patch_d)),
    )
    return apply_config(base, mapping, prefix="model")


def cmd_train(args) -> int:
    from .persistence import read_manifest

    mapping = _load_mapping(args)
    train_cfg = _train_config(args, mapping)
    train_path = args.train_data or train_cfg.train_path
    if not train_path:
        raise NoisyGraspError("no training dataset: pass --train-data or train.train_path")
    model_cfg = _model_config_for_dataset(mapping, read_manifest(train_path))
    data = PreparedDataset(train_path, model_cfg)

    if args.stage == "1":
        from .model import save_checkpoint
        from .training import build_model, train_stage1, write_metrics

        model = build_model(model_cfg, train_cfg, variant=args.variant)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        history = train_stage1(model, data, train_cfg, out_dir=out)
        write_metrics(out / "metrics.jsonl", history)
        save_checkpoint(model, out / "checkpoint.pt", extra={
            "train_config": train_cfg.to_dict(), "variant": args.variant,
            "cold_start": False, "stage": 1,
            "robot_ids": list(data.manifest.robot_ids),
            "world_config": dict(data.manifest.world_config),
        })
    else:
        # stage "2" alone is an explicit cold start (no stage-1 warmup)
        model, _ = train_model(train_path, model_cfg, train_cfg, variant=args.variant,
                               cold_start=args.stage == "2", out_dir=args.out, data=data)
    verify_dataset(train_path)
    print(f"trained ({args.variant}, stage {args.stage}) -> {args.out}")

    heldout = args.heldout_data or train_cfg.heldout_path
    if heldout:
        hdata = PreparedDataset(heldout, model_cfg)
        metrics = evaluate_binary(model, hdata, threshold=train_cfg.threshold,
                                  train_manifest=data.manifest)
        verify_dataset(heldout)
        print(f"heldout accuracy {metrics['accuracy']:.4f} on {metrics['n']} records")
    return 0


def cmd_eval(args) -> int:
    mapping = _load_mapping(args)
    model, extra = load_checkpoint(args.checkpoint)
    model_cfg = model.cfg
    data = PreparedDataset(args.data, model_cfg)
    train_manifest = None
    if args.train_data:
        from .persistence import read_manifest

        train_manifest = read_manifest(args.train_data)
    threshold = apply_config(TrainConfig(), mapping, prefix="train").threshold
    metrics = evaluate_binary(model, data, threshold=threshold,
                              train_manifest=train_manifest)
    verify_dataset(args.data)
    print(f"accuracy {metrics['accuracy']:.4f} on {metrics['n']} records "
          f"(positive rate {metrics['positive_rate']:.3f})")
    for rid, acc in metrics["per_robot"].items():
        print(f"  robot {rid}: {acc:.4f}")
    if args.cell:
        model_name, train_set, test_set = args.cell
        out_dir = Path(args.metrics_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cell = {
            "model": model_name, "train_set": train_set, "test_set": test_set,
            "accuracy": metrics["accuracy"], "n": metrics["n"],
        }
        path = out_dir / f"eval_{model_name}_{train_set}_{test_set}.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(cell, f, indent=1, sort_keys=True)
        print(f"wrote grid cell {path}")
    return 0


def cmd_report(args) -> int:
    text = report_tables(args.metrics_dir, out_path=args.out)
    print(text, end="")
    return 0


def cmd_viz_noise(args) -> int:
    summary = emit_noise_field_plot(args.checkpoint, args.robot, args.grid, args.out)
    print(f"wrote field dump to {args.out}")
    print(f"consistency {summary['consistency'] * 100:.2f}% ({summary['orientation']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisygrasp",
        description="Synthetic noisy-robot grasping: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the primary seed")
        p.add_argument("--config", default=None, help="flat key/value config file")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic execution")

    p = sub.add_parser("generate", help="generate a synthetic labelled dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of grasp records")
    p.add_argument("--split", default="train", choices=["train", "heldout", "test"])
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("collect", help="run collection episodes and save the records")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--split", default="train", choices=["train", "heldout", "test"])
    p.add_argument("--policy", default="random",
                   help="'random' or 'model:<checkpoint path>'")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train stage 1, stage 2, or both")
    common(p)
    p.add_argument("--train-data", default=None)
    p.add_argument("--heldout-data", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", default="both", choices=["1", "2", "both"])
    p.add_argument("--variant", default="robust", choices=["robust", "patch"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out binary accuracy of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", default=None,
                   help="training dataset for the disjointness check")
    p.add_argument("--cell", nargs=3, metavar=("MODEL", "TRAIN_SET", "TEST_SET"),
                   default=None, help="also write an accuracy-grid cell")
    p.add_argument("--metrics-dir", default="metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render the accuracy grid from eval cells")
    common(p)
    p.add_argument("--metrics-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("viz-noise", help="dump the learned correction field")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--robot", type=int, required=True)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz_noise)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NoisyGraspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
