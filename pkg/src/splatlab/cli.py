"""``splatlab`` command line: synth, train, render, eval, extent, ablate, report."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .adc import PRESETS
from .core import FLAT2D, MODES, ContractViolation
from .scene_io import (
    SYNTHETIC_KINDS,
    ParseError,
    load_cameras,
    save_cameras,
    save_dataset,
    synthetic_scene,
    write_image,
)
from .trainer import TrainConfig, evaluate, load_checkpoint, render_view, train

DEFAULT_KIND = {FLAT2D: "flat_targets"}


def _config(args) -> TrainConfig:
    """Config file, then preset, then single-value overrides, in that order."""
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.preset:
        cfg = replace(cfg, adc=PRESETS[args.preset](**{k: v for k, v in cfg.adc.to_dict().items()
                                                      if k in _SCHEDULE_FIELDS}))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.iterations is not None:
        cfg = replace(cfg, total_iterations=args.iterations)
    return cfg


_SCHEDULE_FIELDS = ("densify_from", "densify_until", "densify_interval", "opacity_reset_interval")


def _check_mode(dataset, mode):
    if mode and dataset.mode != mode:
        raise ContractViolation(f"dataset is {dataset.mode}, --mode asked for {mode}")


def _save_array_or_image(path: Path, image: np.ndarray) -> None:
    if path.suffix == ".npy":
        np.save(path, image)
    else:
        write_image(path, image)


def cmd_synth(args) -> int:
    kind = args.kind or DEFAULT_KIND.get(args.mode, "ring_cameras_3d")
    seed = 0 if args.seed is None else args.seed
    dataset, _ = synthetic_scene(kind, seed)
    out = save_dataset(dataset, args.out)
    harness.write_manifest(args.out, "synth", vars(args), {"dataset": out})
    print(f"wrote {kind} dataset ({len(dataset.cameras)} views) to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = harness.resolve_dataset(args.dataset)
    _check_mode(dataset, args.mode)
    cfg = _config(args)
    out = Path(args.out)
    result = train(dataset, cfg, out_dir=out)
    save_cameras(out / "cameras.json", dataset.cameras)
    if result.last_renders:
        np.save(out / "last_render.npy", result.last_renders[0])
    outputs = {n: out / n for n in ("config.txt", "metrics.csv", "densify.csv", "checkpoint.bin",
                                    "cameras.json")}
    harness.write_manifest(out, "train", vars(args), outputs)
    final = result.metrics[-1] if result.metrics else None
    if final is not None:
        print(f"iteration {final.iteration}: psnr {final.psnr:.3f} ssim {final.ssim:.4f} "
              f"gaussians {result.scene.n}")
    return 0


def _cameras_for(args):
    if args.dataset:
        return harness.resolve_dataset(args.dataset).cameras
    path = Path(args.checkpoint).parent / "cameras.json"
    if not path.exists():
        raise ContractViolation(f"no cameras.json next to {args.checkpoint}; pass --dataset")
    return load_cameras(path)


def cmd_render(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_text(state.config_text)
    cams = _cameras_for(args)
    if not 0 <= args.camera_index < len(cams):
        raise ContractViolation(f"camera index {args.camera_index} out of range 0..{len(cams) - 1}")
    image = render_view(state.scene, cams[args.camera_index], np.asarray(cfg.background, dtype=np.float64))
    path = Path(args.out_image)
    path.parent.mkdir(parents=True, exist_ok=True)
    _save_array_or_image(path, image)
    print(f"wrote {path}")
    return 0


def eval_checkpoint(checkpoint, dataset_ref):
    state = load_checkpoint(checkpoint)
    cfg = TrainConfig.from_text(state.config_text)
    dataset = harness.resolve_dataset(dataset_ref)
    train_ids, holdout_ids = dataset.split(cfg.holdout_stride)
    views = [(dataset.cameras[i], dataset.images[i]) for i in (holdout_ids or train_ids[:1])]
    rep = evaluate(state.scene, views, np.asarray(cfg.background, dtype=np.float64))
    rep.iteration = state.iteration
    return rep


def cmd_eval(args) -> int:
    rep = eval_checkpoint(args.checkpoint, args.dataset)
    print(f"iteration {rep.iteration}: psnr {rep.psnr!r} ssim {rep.ssim!r} l1 {rep.l1!r} "
          f"gaussians {rep.gaussian_count}")
    return 0


def cmd_extent(args) -> int:
    report = harness.extent_report(harness.resolve_dataset(args.dataset))
    print(report.to_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    if args.spec:
        spec = harness.AblationSpec.from_text(Path(args.spec).read_text())
    else:
        base = TrainConfig.load(args.config) if args.config else harness.desk_config("ours")
        spec = harness.ours_vs_ablations(base, args.variants)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [spec.base.seed if args.seed is None
                                                                        else args.seed]
    workers = args.workers or harness.default_workers()
    results = harness.run_ablation(args.dataset, spec, args.out, seeds, workers,
                                   dataset_per_seed=args.dataset_per_seed)
    outputs = {"table": Path(args.out) / "ablation.csv", "runs": Path(args.out) / "ablation_runs.csv"}
    harness.write_manifest(args.out, "ablate", vars(args), outputs)
    print(f"{'variant':<24} {'psnr':>8} {'ssim':>7} {'l1':>8} {'gaussians':>10}")
    for name, runs in results.items():
        print(f"{name:<24} {np.mean([r['psnr'] for r in runs]):8.3f} {np.mean([r['ssim'] for r in runs]):7.4f} "
              f"{np.mean([r['l1'] for r in runs]):8.5f} {np.mean([r['gaussians'] for r in runs]):10.1f}")
    return 0


def cmd_report(args) -> int:
    files = harness.make_report(args.runs, args.out)
    harness.write_manifest(args.out, "report", vars(args), files)
    for path in files.values():
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--iterations", type=int, help="override total_iterations")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--mode", choices=MODES)
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--kind", choices=SYNTHETIC_KINDS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory or synthetic:<kind>:<seed>")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one camera from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera-index", type=int, required=True)
    p.add_argument("--out-image", required=True, help=".png, .ppm or .npy (exact float64)")
    p.add_argument("--dataset", help="camera source if the run directory has no cameras.json")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="holdout metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extent", help="compare camera-based and point-based scene extents")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_extent)

    p = sub.add_parser("ablate", help="run the ablation matrix")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--spec", help="ablation spec file; default is the full ablation table")
    p.add_argument("--variants", nargs="+", help="subset of the default variant names")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--dataset-per-seed", action="store_true",
                   help="regenerate a synthetic:<kind>:<seed> dataset for each seed")
    p.add_argument("--workers", type=int, help="parallel processes (default: available cores)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plots and summary from run directories")
    p.add_argument("runs", nargs="+", help="run directories holding metrics.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    harness.tune_allocator()
    try:
        return args.func(args)
    except (ContractViolation, ParseError, FileNotFoundError, ValueError) as exc:
        print(f"splatlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
