"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .boxcodec import load_boxes, save_boxes
from .config import PipelineConfig
from .datagen import generate_dataset
from .errors import ConfigError, NumericalError, PartvoxError
from .latents import save_parts
from .pipeline import (
    ABLATION_VARIANTS,
    evaluate_dirs,
    load_planner,
    load_synth,
    plan_object,
    read_mask,
    run_ablation,
    run_pipeline,
    save_model,
    synthesize_object,
    train_planner_on,
    train_synth_on,
    variant_config,
)
from .voxels import SparseVoxelGrid

log = logging.getLogger("partvox")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _path(args, cfg: PipelineConfig, name: str, key: str | None = None):
    value = getattr(args, name, None)
    if value is None and key is not None:
        value = cfg.paths.get(key)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required (or set paths.{key} in the config)")
    return Path(value)


def cmd_datagen(args, cfg):
    out = _path(args, cfg, "out", "data")
    sizes = {"train": args.train if args.train is not None else cfg.train,
             "val": args.val if args.val is not None else cfg.val,
             "test": args.test if args.test is not None else cfg.test}
    manifest = generate_dataset(out, sizes, cfg.resolution, cfg.seed, cfg.K, cfg.alpha, cfg.D,
                                config_hash=cfg.hash())
    log.info("wrote %d objects to %s", len(manifest["objects"]), out)
    print(json.dumps(manifest["bucket_stats"], sort_keys=True))


def cmd_plan_train(args, cfg):
    data = _path(args, cfg, "data", "data")
    out = _path(args, cfg, "out", "planner_ckpt")
    pcfg = variant_config(cfg, args.variant, args.steps)
    model, hist = train_planner_on(data, pcfg, log_every=args.log_every)
    save_model(model, pcfg, "planner", out, cfg.hash(),
               {"final_loss": hist[-1]["loss"], "final_acc": hist[-1]["acc"], "variant": args.variant})
    print(f"planner: {model.num_params} parameters, final loss {hist[-1]['loss']:.4f} -> {out}")


def cmd_plan_sample(args, cfg):
    _require(args, "voxels", "mask", "out")
    model = load_planner(_path(args, cfg, "ckpt", "planner_ckpt"))
    grid = SparseVoxelGrid.load(args.voxels)
    boxes = plan_object(model, grid, read_mask(args.mask))
    save_boxes(boxes, args.out)
    print(f"{len(boxes)} boxes -> {args.out}")


def cmd_synth_train(args, cfg):
    data = _path(args, cfg, "data", "data")
    out = _path(args, cfg, "out", "synth_ckpt")
    scfg = cfg.synth(**({"steps": args.steps} if args.steps is not None else {}))
    model, hist = train_synth_on(data, scfg, log_every=args.log_every)
    save_model(model, scfg, "synth", out, cfg.hash(), {"final_loss": hist[-1]["loss"]})
    print(f"synthesizer: {model.num_params} parameters, final loss {hist[-1]['loss']:.4f} -> {out}")


def cmd_synth_sample(args, cfg):
    _require(args, "boxes", "voxels", "out")
    model = load_synth(_path(args, cfg, "ckpt", "synth_ckpt"))
    grid = SparseVoxelGrid.load(args.voxels)
    boxes = load_boxes(args.boxes)
    seed = cfg.seed if args.sample_seed is None else args.sample_seed
    _, filtered, merged = synthesize_object(model, grid, boxes, seed, args.steps, cfg.beta)
    save_parts(filtered, args.out, {"config_hash": cfg.hash(), "retained": len(merged)})
    print(f"{len(filtered.parts)} parts, {len(merged)} merged voxels -> {args.out}")


def cmd_pipeline(args, cfg):
    result = run_pipeline(cfg, _path(args, cfg, "data", "data"), _path(args, cfg, "planner_ckpt", "planner_ckpt"),
                          _path(args, cfg, "synth_ckpt", "synth_ckpt"), _path(args, cfg, "out", "out"),
                          split=args.split, limit=args.limit, oracle=args.oracle)
    agg = result.report.aggregate()
    print(json.dumps(agg, sort_keys=True))
    if result.report.failed:
        log.error("%d objects failed: %s", len(result.report.failed), ", ".join(sorted(result.report.failed)))
        return EXIT_DATA
    return EXIT_OK


def cmd_eval(args, cfg):
    _require(args, "pred", "gt", "report")
    report = evaluate_dirs(args.pred, args.gt, args.oracle, cfg.hash())
    Path(args.report).write_text(report.dumps())
    print(json.dumps(report.aggregate(), sort_keys=True))
    return EXIT_DATA if report.failed else EXIT_OK


def cmd_ablate(args, cfg):
    data = _path(args, cfg, "data", "data")
    _require(args, "report")
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    result = run_ablation(cfg, data, variants, args.steps, args.log_every)
    Path(args.report).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    for row in result["table"]:
        print(f"{row['variant']:12s} recall {row['voxel_recall']:6.2f}  voxel IoU {row['voxel_iou']:6.2f}  "
              f"bbox IoU {row['bbox_iou']:6.2f}")
    for name, c in result["comparisons"].items():
        print(f"{name}: recall gap {c['recall_gap']:+.2f} ({c['sign']})")


def cmd_grad_check(args, cfg):
    from .diagnostics import run_grad_checks

    reports = run_grad_checks(samples=args.samples, tolerance=args.tolerance, seed=cfg.seed)
    ok = True
    for name, r in reports.items():
        ok &= r.passed
        print(f"{name:14s} max rel err {r.max_rel_error:.3e} over {r.checked} coords -> "
              f"{'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--verbose", "-v", action="store_true")

    p = _Parser(prog="partvox", description="Part-aware voxel generation: plan boxes, then synthesize parts.",
                parents=[common])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("datagen", parents=[common], help="generate a procedural corpus")
    s.add_argument("--out")
    s.add_argument("--train", type=int)
    s.add_argument("--val", type=int)
    s.add_argument("--test", type=int)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("plan-train", parents=[common], help="train the box planner")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--variant", choices=ABLATION_VARIANTS, default="full")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_plan_train)

    s = sub.add_parser("plan-sample", parents=[common], help="plan boxes for one object")
    s.add_argument("--ckpt")
    s.add_argument("--voxels")
    s.add_argument("--mask")
    s.add_argument("--out")
    s.set_defaults(func=cmd_plan_sample)

    s = sub.add_parser("synth-train", parents=[common], help="train the part synthesizer")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_synth_train)

    s = sub.add_parser("synth-sample", parents=[common], help="generate parts inside given boxes")
    s.add_argument("--ckpt")
    s.add_argument("--boxes")
    s.add_argument("--voxels")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--sample-seed", "-S", type=int, dest="sample_seed")
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth_sample)

    s = sub.add_parser("pipeline", parents=[common], help="end-to-end inference and evaluation")
    s.add_argument("--data")
    s.add_argument("--planner-ckpt")
    s.add_argument("--synth-ckpt")
    s.add_argument("--out")
    s.add_argument("--split", default="test")
    s.add_argument("--limit", type=int)
    s.add_argument("--oracle", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("eval", parents=[common], help="score predicted objects against a dataset")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--report")
    s.add_argument("--oracle", action="store_true", help="brute-force nearest neighbours")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="planner ablation: full / no_mask / no_coverage")
    s.add_argument("--data")
    s.add_argument("--report")
    s.add_argument("--steps", type=int)
    s.add_argument("--variants")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference checks of every loss")
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        torch.set_num_threads(max(1, args.threads))
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        code = args.func(args, cfg)
        return EXIT_OK if code is None else int(code)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PartvoxError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
