"""Command surface: gen-data, train, complete, eval, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  All outputs are
deterministic under fixed seeds and inputs.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import SHAPE_KINDS, generate_dataset, load_dataset, read_xyz, write_xyz
from .model import ModelConfig, spcnet_forward
from .rng import Rng
from .tensor import Tensor, no_grad
from .training import TrainConfig, evaluate, train

VARIANTS = (
    "scm1", "scm2", "pointnet-mlp", "one-subnet", "no-agg",
    "edge-conv", "rps", "pnk-pn", "pnkk-pn",
)


def _parse_viewpoint(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"viewpoint needs 3 coordinates, got {text!r}")
    return tuple(float(p) for p in parts)


def _config_from_args(args) -> ModelConfig:
    config = ModelConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
        known = {f.name for f in dataclass_fields(ModelConfig)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "upsample_factors" in overrides:
            overrides["upsample_factors"] = tuple(overrides["upsample_factors"])
        config = replace(config, **overrides)
    if getattr(args, "missing_ratio", None) is not None:
        config = replace(config, missing_ratio=args.missing_ratio)
    if getattr(args, "loss_mode", None) is not None:
        config = replace(config, loss_mode=args.loss_mode.upper())
    if getattr(args, "points", None) is not None:
        config = replace(config, points_per_shape=args.points)
    if getattr(args, "width_scale", None) is not None:
        config = replace(config, width_scale=args.width_scale)
    if getattr(args, "knn_k", None) is not None:
        config = replace(config, knn_k=args.knn_k)
    return config


def _apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    if variant == "scm1":
        return replace(config, scm_count=1, upsample_factors=(1,))
    if variant == "scm2":
        return replace(config, scm_count=2, upsample_factors=(config.down_rate, 1))
    if variant == "pointnet-mlp":
        return replace(config, vmlp_kind="pointnet_mlp")
    if variant == "one-subnet":
        return replace(config, vmlp_kind="one_subnet")
    if variant == "no-agg":
        return replace(config, use_aggregation=False)
    if variant == "edge-conv":
        return replace(config, conv_kind="edge")
    if variant == "rps":
        return replace(config, sampling_kind="rps")
    if variant in ("pnk-pn", "pnkk-pn"):
        return replace(config, partial_substitution=variant)
    raise ValueError(f"unknown variant {variant!r}")


# -- subcommands --------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    kinds = [k.strip() for k in args.shapes.split(",") if k.strip()]
    generate_dataset(args.out, kinds, args.count, args.points, args.seed)
    print(f"wrote {args.count} shapes ({args.points} points each) to {args.out}")
    return 0


def _run_training(args, config: ModelConfig) -> int:
    dataset = load_dataset(args.data)
    n_points = dataset.shapes[0][1].shape[0]
    if n_points != config.points_per_shape:
        config = replace(config, points_per_shape=n_points)
    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        lr_decay=args.lr_decay,
    )
    result = train(dataset, config, train_config)
    ckpt = Checkpoint(
        config=result.config, params=result.params, adam=result.adam, meta=result.meta
    )
    save_checkpoint(ckpt, args.out)
    saved = [str(args.out)]
    if result.reverse_params is not None:
        rev_path = Path(args.out).with_suffix(".rev.spcn")
        save_checkpoint(
            Checkpoint(
                config=result.reverse_config,
                params=result.reverse_params,
                adam=result.reverse_adam,
                meta=result.meta,
            ),
            rev_path,
        )
        saved.append(str(rev_path))
    lines = result.trace_lines()
    if args.trace:
        with open(args.trace, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    print(f"saved checkpoint(s): {', '.join(saved)}")
    return 0


def _cmd_train(args) -> int:
    return _run_training(args, _config_from_args(args))


def _cmd_ablate(args) -> int:
    config = _apply_variant(_config_from_args(args), args.variant)
    return _run_training(args, config)


def _cmd_complete(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    partial = read_xyz(getattr(args, "in"))
    if partial.shape[0] != ckpt.config.partial_count:
        raise ValueError(
            f"checkpoint expects a partial cloud of {ckpt.config.partial_count} "
            f"points, input has {partial.shape[0]}"
        )
    rng = Rng(args.seed) if ckpt.config.sampling_kind == "rps" else None
    with no_grad():
        out = spcnet_forward(Tensor(partial), ckpt.params, ckpt.config, rng=rng)
    union = np.concatenate([partial, out.final.data], axis=0)
    write_xyz(union, args.out)
    if args.emit_stages:
        stage_dir = Path(args.emit_stages)
        stage_dir.mkdir(parents=True, exist_ok=True)
        names = (
            ["coarse", "mid", "fine", "final"]
            if len(out.stages) == 4
            else [f"stage{i}" for i in range(len(out.stages))]
        )
        for name, stage in zip(names, out.stages):
            write_xyz(stage.data, stage_dir / f"{name}.xyz")
    print(f"wrote {union.shape[0]} points to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    report = evaluate(
        ckpt.params, ckpt.config, dataset,
        viewpoint=args.viewpoint, stagewise=args.stagewise, seed=args.seed,
    )
    csv = report.to_csv()
    if args.report:
        with open(args.report, "w", newline="\n") as fh:
            fh.write(csv)
    print(csv, end="")
    return 0


# -- parser -------------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-ratio", type=float, default=None)
    p.add_argument("--loss-mode", choices=["1l", "2l", "4l"], default=None)
    p.add_argument("--config", default=None, help="JSON file of model-config overrides")
    p.add_argument("--trace", default=None, help="write the per-epoch loss trace here")
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-decay", choices=["none", "cosine"], default="none")
    p.add_argument("--width-scale", type=float, default=None)
    p.add_argument("--knn-k", type=int, default=None)
    p.add_argument("--points", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spcnet", description="stepwise point-cloud completion"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", default=",".join(SHAPE_KINDS),
                   help=f"comma-separated kinds from {SHAPE_KINDS}")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a completion network")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("complete", help="complete a partial cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in", required=True, help="partial .xyz input")
    p.add_argument("--out", required=True, help="completed .xyz output")
    p.add_argument("--emit-stages", default=None, help="directory for stage dumps")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_complete)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--viewpoint", type=_parse_viewpoint, default=(1.0, 1.0, 1.0))
    p.add_argument("--report", default=None, help="CSV output path")
    p.add_argument("--stagewise", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train a named ablation variant")
    p.add_argument("--variant", choices=VARIANTS, required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
