"""Experiment plumbing behind the CLI: runs, ablations, extent audits, reports."""

from __future__ import annotations

import csv
import ctypes
import json
import logging
import multiprocessing as mp
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adc import (
    CAMERA_BASELINE,
    CONSTANT,
    PRESETS,
    PRUNE_OPACITY_SIZE,
    AdcConfig,
    _format_value,
    baseline_config,
    camera_center,
    parse_key_values,
    scene_extent_baseline,
    scene_extent_corrected,
    threshold_at,
)
from .core import ContractViolation
from .scene_io import load_dataset, synthetic_scene
from .trainer import (
    TrainConfig,
    TrainResult,
    read_densify_csv,
    read_metrics_csv,
    train,
)

logger = logging.getLogger(__name__)

TABLE_HEADER = ("variant", "psnr", "ssim", "l1", "gaussians")


def tune_allocator() -> bool:
    """Keep freed heap pages mapped so per-iteration image buffers skip page faults.

    Only affects glibc; returns False where mallopt is unavailable.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    ok = libc.mallopt(m_mmap_threshold, 1 << 30) == 1
    return ok and libc.mallopt(m_trim_threshold, 2**31 - 1) == 1


# ---------------------------------------------------------------------------
# dataset references (picklable, for worker processes)
# ---------------------------------------------------------------------------

def resolve_dataset(ref):
    """Dataset from a path, a Dataset, or ``synthetic:<kind>:<seed>``."""
    if hasattr(ref, "cameras"):
        return ref
    text = str(ref)
    if text.startswith("synthetic:"):
        _, kind, seed = text.split(":")
        return synthetic_scene(kind, int(seed))[0]
    return load_dataset(text)


# ---------------------------------------------------------------------------
# desk-scale experiment configuration
# ---------------------------------------------------------------------------

DESK_THRESHOLD_FACTOR = 10.0


def desk_adc(preset: str = "ours", threshold_factor: float = DESK_THRESHOLD_FACTOR, **overrides) -> AdcConfig:
    """Preset on a 5k-iteration schedule for 256x256 flat scenes.

    All three gradient thresholds are multiplied by the same factor, which
    keeps the constant threshold at the geometric mean of the exponential
    endpoints; at 256x256 the stock values keep densifying down to sub-pixel
    primitives.
    """
    base = PRESETS[preset]()
    cfg = replace(base, densify_from=500, densify_until=2500, densify_interval=100,
                  opacity_reset_interval=1000,
                  grad_threshold=base.grad_threshold * threshold_factor,
                  threshold_start=base.threshold_start * threshold_factor,
                  threshold_final=base.threshold_final * threshold_factor)
    return replace(cfg, **overrides)


def desk_config(preset: str = "ours", seed: int = 0, **adc_overrides) -> TrainConfig:
    return TrainConfig(total_iterations=5000, eval_every=500, seed=seed,
                       adc=desk_adc(preset, **adc_overrides))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass
class AblationSpec:
    """A base config plus named variants, each overriding declared AdcConfig fields."""

    base: TrainConfig
    variants: list[Variant]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ContractViolation(f"variant names must be unique: {names}")
        base_adc = self.base.adc.to_dict()
        for v in self.variants:
            cfg = self.adc_for(v).to_dict()
            changed = {k for k in cfg if cfg[k] != base_adc[k]}
            if changed != set(v.overrides):
                raise ContractViolation(
                    f"variant {v.name!r} declares {sorted(v.overrides)} but changes {sorted(changed)}")

    def adc_for(self, variant: Variant) -> AdcConfig:
        unknown = set(variant.overrides) - set(self.base.adc.to_dict())
        if unknown:
            raise ContractViolation(f"variant {variant.name!r} overrides unknown fields {sorted(unknown)}")
        return replace(self.base.adc, **variant.overrides)

    def config_for(self, variant: Variant, seed: int | None = None) -> TrainConfig:
        cfg = replace(self.base, adc=self.adc_for(variant))
        return cfg if seed is None else replace(cfg, seed=seed)

    def to_text(self) -> str:
        lines = [self.base.to_text()]
        for v in self.variants:
            lines.append(f"[variant {v.name}]\n")
            lines += [f"{k} = {_format_value(val)}\n" for k, val in v.overrides.items()]
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "AblationSpec":
        sections = text.split("[variant ")
        base = TrainConfig.from_text(sections[0])
        variants = []
        for sec in sections[1:]:
            header, _, body = sec.partition("\n")
            raw = parse_key_values(body)
            merged = AdcConfig.from_dict({**base.adc.to_dict(), **raw})
            variants.append(Variant(header.strip().removesuffix("]"), {k: getattr(merged, k) for k in raw}))
        return cls(base, variants)


def ours_vs_ablations(base: TrainConfig | None = None, names=None) -> AblationSpec:
    """The ablation rows: ours, single-component removals, and the baseline."""
    base = base if base is not None else desk_config("ours")
    ours = base.adc
    baseline = baseline_config(**{k: getattr(ours, k) for k in (
        "densify_from", "densify_until", "densify_interval", "opacity_reset_interval",
        "grad_threshold", "threshold_start", "threshold_final", "grad_scale")})
    baseline_diff = {k: v for k, v in baseline.to_dict().items() if ours.to_dict()[k] != v}
    table = [
        Variant("ours", {}),
        Variant("w/o extent correction", {"extent_mode": CAMERA_BASELINE}),
        Variant("w/o pruning strategy", {"prune_mode": PRUNE_OPACITY_SIZE}),
        Variant("w/o exp grad thresh", {"threshold_mode": CONSTANT}),
        Variant("w/o opacity correction", {"use_opacity_correction": False}),
        Variant("w/o pixel gradient", {"use_pixel_aware_grad": False}),
        Variant("baseline", baseline_diff),
    ]
    if names is not None:
        wanted = list(names)
        table = [v for v in table if v.name in wanted]
    return AblationSpec(base, table)


def slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_").lower()


def _run_job(job) -> dict:
    dataset_ref, config_text, out_dir, threads = job
    tune_allocator()
    if threads:
        import numba

        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    cfg = TrainConfig.from_text(config_text)
    result = train(resolve_dataset(dataset_ref), cfg, out_dir=out_dir)
    return summarize(result)


def summarize(result: TrainResult) -> dict:
    final = result.metrics[-1]
    return {"psnr": final.psnr, "ssim": final.ssim, "l1": final.l1,
            "gaussians": result.scene.n,
            "densify": [(d.iteration, d.n_created, d.n_densified) for d in result.densify_log],
            "wall_time": final.wall_time}


def run_jobs(jobs, workers: int = 1) -> list[dict]:
    """Run (dataset_ref, config_text, out_dir) jobs, in worker processes if workers > 1."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job((*j, 0)) for j in jobs]
    ctx = mp.get_context("spawn")
    with ctx.Pool(processes=workers) as pool:
        return pool.map(_run_job, [(*j, 1) for j in jobs], chunksize=1)


def default_workers() -> int:
    env = os.environ.get("SPLATLAB_THREADS")
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
    return max(1, min(int(env), cores) if env else cores)


def run_ablation(dataset_ref, spec: AblationSpec, out_dir, seeds=(0,), workers: int = 1,
                 dataset_per_seed: bool = False) -> dict:
    """Train every variant for every seed and write the ablation tables.

    With ``dataset_per_seed`` the dataset reference must be a synthetic
    ``synthetic:<kind>:<seed>`` string whose seed is replaced per run.
    Returns {variant: [per-seed summaries]}; writes ablation.csv (means) and
    ablation_runs.csv (one row per run) under ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_spec.txt").write_text(spec.to_text())
    jobs, keys = [], []
    for v in spec.variants:
        for seed in seeds:
            cfg = spec.config_for(v, seed)
            ref = dataset_ref
            if dataset_per_seed:
                kind = str(dataset_ref).split(":")[1]
                ref = f"synthetic:{kind}:{seed}"
            run_dir = out / slug(v.name) / f"seed_{seed}"
            jobs.append((ref, cfg.to_text(), str(run_dir)))
            keys.append((v.name, seed))
    summaries = run_jobs(jobs, workers)
    results: dict[str, list[dict]] = {v.name: [] for v in spec.variants}
    for (name, seed), summary in zip(keys, summaries):
        results[name].append({"seed": seed, **summary})
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "seed") + TABLE_HEADER[1:])
        for name, runs in results.items():
            for r in runs:
                w.writerow([name, r["seed"], repr(r["psnr"]), repr(r["ssim"]), repr(r["l1"]), r["gaussians"]])
    write_ablation_table(out / "ablation.csv", results)
    return results


def write_ablation_table(path, results: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for name, runs in results.items():
            w.writerow([name] + [repr(float(np.mean([r[k] for r in runs]))) for k in ("psnr", "ssim", "l1")]
                       + [repr(float(np.mean([r["gaussians"] for r in runs])))])


# ---------------------------------------------------------------------------
# extent audit
# ---------------------------------------------------------------------------

@dataclass
class ExtentReport:
    baseline: float
    corrected: float
    ratio: float
    camera_spread_mean: float
    camera_spread_max: float
    point_spread_mean: float
    point_spread_median: float
    point_spread_max: float
    degenerate: bool

    def to_text(self) -> str:
        ratio = "inf (degenerate baseline)" if self.degenerate else f"{self.ratio:.6g}"
        return (f"baseline extent   {self.baseline:.6g}\n"
                f"corrected extent  {self.corrected:.6g}\n"
                f"ratio             {ratio}\n"
                f"camera spread     mean {self.camera_spread_mean:.6g}  max {self.camera_spread_max:.6g}\n"
                f"point spread      mean {self.point_spread_mean:.6g}  median "
                f"{self.point_spread_median:.6g}  max {self.point_spread_max:.6g}\n")


def extent_report(dataset) -> ExtentReport:
    cams = dataset.cameras
    center = camera_center(cams)
    cam_d = np.linalg.norm(np.array([c.position for c in cams]) - center, axis=1)
    pts_d = np.linalg.norm(dataset.sfm_points - center, axis=1)
    base = scene_extent_baseline(cams)
    corr = scene_extent_corrected(cams, dataset.sfm_points)
    degenerate = base <= 0.0
    if degenerate:
        warnings.warn("degenerate baseline extent 0 (cameras coincide); ratio is undefined", RuntimeWarning)
    return ExtentReport(base, corr, corr / base if not degenerate else float("inf"),
                        float(cam_d.mean()), float(cam_d.max()), float(pts_d.mean()),
                        float(np.median(pts_d)), float(pts_d.max()), degenerate)


# ---------------------------------------------------------------------------
# reports and plots
# ---------------------------------------------------------------------------

@dataclass
class RunLog:
    name: str
    metrics: list
    densify: list
    config: TrainConfig | None


def load_run(run_dir) -> RunLog:
    run_dir = Path(run_dir)
    metrics = read_metrics_csv(run_dir / "metrics.csv")
    densify = read_densify_csv(run_dir / "densify.csv") if (run_dir / "densify.csv").exists() else []
    cfg = TrainConfig.load(run_dir / "config.txt") if (run_dir / "config.txt").exists() else None
    return RunLog(run_dir.name if run_dir.name else str(run_dir), metrics, densify, cfg)


def count_trajectory(log: RunLog) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian count at every logged point (densify steps and evaluations)."""
    pts = {m.iteration: m.gaussian_count for m in log.metrics}
    for d in log.densify:
        pts.setdefault(d.iteration, d.n_after)
    its = np.array(sorted(pts))
    return its, np.array([pts[i] for i in its])


def threshold_curve(config: AdcConfig, samples: int = 201) -> tuple[np.ndarray, np.ndarray]:
    its = np.linspace(0, config.densify_until, samples).round().astype(int)
    its[-1] = config.densify_until
    return its, np.array([threshold_at(int(i), config) for i in its])


def _plot(path, series, xlabel, ylabel, title, logy=False):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for label, x, y in series:
        ax.plot(x, y, label=label, linewidth=1.5)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    # no timestamp or version metadata, so identical input gives identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def make_report(run_dirs, out_dir) -> dict:
    """Plots of Gaussian count, PSNR and threshold schedule plus summary.csv."""
    run_dirs = list(run_dirs)
    if not run_dirs:
        raise ContractViolation("report needs at least one metric log")
    logs = [load_run(d) for d in run_dirs]
    for log, d in zip(logs, run_dirs):
        if not log.metrics:
            raise ContractViolation(f"metric log {d} has no iterations to plot")
    names = [log.name for log in logs]
    if len(set(names)) != len(names):
        names = [str(d) for d in run_dirs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts, psnrs, thresholds = [], [], []
    for name, log in zip(names, logs):
        x, y = count_trajectory(log)
        counts.append((name, x, y))
        psnrs.append((name, [m.iteration for m in log.metrics], [m.psnr for m in log.metrics]))
        if log.config is not None:
            tx, ty = threshold_curve(log.config.adc)
            thresholds.append((name, tx, ty))
    files = {"gaussians": out / "gaussians.png", "psnr": out / "psnr.png",
             "threshold": out / "threshold.png", "threshold_data": out / "threshold.csv",
             "summary": out / "summary.csv"}
    _plot(files["gaussians"], counts, "iteration", "Gaussians", "Number of Gaussians during training")
    _plot(files["psnr"], psnrs, "iteration", "PSNR (dB)", "Holdout PSNR")
    _plot(files["threshold"], thresholds, "iteration", "gradient threshold", "Densification threshold",
          logy=True)
    with open(files["threshold_data"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "iteration", "threshold"))
        for name, tx, ty in thresholds:
            w.writerows((name, int(i), repr(float(t))) for i, t in zip(tx, ty))
    with open(files["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "iterations", "psnr", "ssim", "l1", "gaussians", "n_created"))
        for name, log in zip(names, logs):
            m = log.metrics[-1]
            w.writerow([name, m.iteration, repr(m.psnr), repr(m.ssim), repr(m.l1), m.gaussian_count,
                        sum(d.n_created for d in log.densify)])
    return {k: str(v) for k, v in files.items()}


def write_manifest(out_dir, command: str, args: dict, outputs: dict) -> Path:
    path = Path(out_dir) / "manifest.json"
    doc = {"command": command, "args": {k: str(v) for k, v in sorted(args.items())},
           "outputs": {k: str(v) for k, v in sorted(outputs.items())}}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path
