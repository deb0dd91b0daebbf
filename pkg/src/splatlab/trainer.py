"""Optimization loop, holdout evaluation, checkpoints and metric logs."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .adc import (
    AdcConfig,
    DensifyReport,
    DensifyStats,
    _format_value,
    coerce_fields,
    densify_and_prune,
    is_densify_step,
    is_reset_step,
    opacity_reset,
    parse_key_values,
    resolve_extent,
    scene_extent_baseline,
)
from .core import FLAT2D, PARAM_FIELDS, PERSPECTIVE3D, ContractViolation, SceneModel, logit
from .gradients import backward
from .metrics import DSSIM_WEIGHT, MetricReport, prepare_target, report, training_loss
from .optim import AdamState, position_lr_at
from .projection import Camera, cull_and_project
from .raster import render

logger = logging.getLogger(__name__)

METRICS_HEADER = ("iteration", "psnr", "ssim", "l1", "gaussians", "wall_time_s")
DENSIFY_HEADER = ("iteration", "threshold", "n_before", "n_cloned", "n_split", "n_pruned", "n_after")
CHECKPOINT_MAGIC = b"SPLATCKP"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    total_iterations: int = 30000
    eval_every: int = 1000
    seed: int = 0
    holdout_stride: int = 8
    adc: AdcConfig = field(default_factory=AdcConfig)
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_logit_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    couple_lr_to_extent: bool = True
    position_lr_scale: float = 0.0  # > 0 overrides the camera-extent scale
    lambda_dssim: float = DSSIM_WEIGHT
    init_opacity: float = 0.1
    flat_grid: int = 16
    flat_jitter: float = 0.5

    def __post_init__(self):
        self.background = tuple(float(v) for v in self.background)
        self.validate()

    def validate(self) -> None:
        if self.holdout_stride < 2:
            raise ContractViolation("holdout_stride must be at least 2")
        if self.total_iterations < self.adc.densify_until:
            raise ContractViolation(
                f"total_iterations {self.total_iterations} < densify_until {self.adc.densify_until}")
        if self.eval_every < 1:
            raise ContractViolation("eval_every must be positive")
        if len(self.background) != 3:
            raise ContractViolation("background needs three channels")
        if not 0 < self.init_opacity < 1:
            raise ContractViolation("init_opacity must be in (0, 1)")

    @property
    def learning_rates(self) -> dict[str, float]:
        return {"position": self.lr_position, "rotation": self.lr_rotation,
                "log_scale": self.lr_log_scale, "logit_opacity": self.lr_logit_opacity,
                "color": self.lr_color}

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format_value(getattr(self, f.name))}\n"
                 for f in fields(self) if f.name != "adc"]
        return "".join(lines) + self.adc.to_text(prefix="adc.")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        adc_values = {k[4:]: v for k, v in values.items() if k.startswith("adc.")}
        own = {k: v for k, v in values.items() if not k.startswith("adc.")}
        own = coerce_fields(cls, own)
        if adc_values:
            own["adc"] = AdcConfig.from_dict(adc_values)
        return cls(**own)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_dict(parse_key_values(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def short_run_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(total_iterations=15000), **overrides)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_from_points(points, colors, opacity: float = 0.1) -> SceneModel:
    """Gaussians at SfM points, isotropic scale = mean distance to the 3 nearest neighbors."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise ContractViolation("cannot initialize from an empty point cloud")
    k = min(4, n)
    if n > 1:
        dist, _ = cKDTree(points).query(points, k=k)
        mean_dist = dist[:, 1:].mean(axis=1)
    else:
        mean_dist = np.ones(1)
    mean_dist = np.maximum(mean_dist, 1e-7)
    rotation = np.zeros((n, 4))
    rotation[:, 0] = 1.0
    return SceneModel(PERSPECTIVE3D, points, rotation, np.repeat(np.log(mean_dist)[:, None], 3, axis=1),
                      np.full(n, logit(opacity)), np.asarray(colors, dtype=np.float64).reshape(n, 3))


def canvas_bounds(cameras) -> tuple[np.ndarray, np.ndarray]:
    """Union of the canvas rectangles seen by flat cameras."""
    lo = np.array([np.inf, np.inf])
    hi = -lo
    for cam in cameras:
        origin = -cam.translation[:2] - cam.principal_point
        lo = np.minimum(lo, origin)
        hi = np.maximum(hi, origin + [cam.width, cam.height])
    return lo, hi


def init_flat_grid(cameras, grid: int, rng: np.random.Generator, jitter: float = 0.5,
                   opacity: float = 0.1, points=None, colors=None) -> SceneModel:
    """Jittered grid over the canvas; depth and color come from the nearest point if given."""
    lo, hi = canvas_bounds(cameras)
    step = (hi - lo) / grid
    gx, gy = np.meshgrid(np.arange(grid) + 0.5, np.arange(grid) + 0.5)
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    cells = cells + rng.uniform(-jitter / 2, jitter / 2, cells.shape)
    pos = lo + cells * step
    n = len(pos)
    if points is not None and len(points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, nearest = cKDTree(points[:, :2]).query(pos)
        depth = points[nearest, 2]
        color = np.asarray(colors, dtype=np.float64).reshape(-1, 3)[nearest]
    else:
        depth = rng.uniform(0.5, 1.5, n) * float(np.mean(hi - lo))
        color = np.full((n, 3), 0.5)
    log_scale = np.tile(np.log(0.5 * step), (n, 1))
    return SceneModel(FLAT2D, pos, np.zeros((n, 1)), log_scale, np.full(n, logit(opacity)),
                      color, depth=depth)


def initialize(dataset, config: TrainConfig, rng: np.random.Generator) -> SceneModel:
    if dataset.mode == FLAT2D:
        return init_flat_grid(dataset.cameras, config.flat_grid, rng, config.flat_jitter,
                              config.init_opacity, dataset.sfm_points, dataset.sfm_colors)
    return init_from_points(dataset.sfm_points, dataset.sfm_colors, config.init_opacity)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def render_view(scene: SceneModel, camera: Camera, background=None) -> np.ndarray:
    bundle, _ = render(cull_and_project(scene, camera), camera.width, camera.height, background)
    return bundle.image


def evaluate(scene: SceneModel, views, background=None, return_renders: bool = False):
    """Mean PSNR, SSIM and L1 over ``views``, a sequence of (camera, target) pairs."""
    views = list(views)
    if not views:
        raise ContractViolation("evaluation needs at least one holdout view")
    reports, renders = [], []
    for cam, target in views:
        image = render_view(scene, cam, background)
        renders.append(image)
        reports.append(report(image, target))
    mean = MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        l1=float(np.mean([r.l1 for r in reports])),
        gaussian_count=scene.n,
    )
    return (mean, renders) if return_renders else mean


# ---------------------------------------------------------------------------
# view order
# ---------------------------------------------------------------------------

@dataclass
class ViewOrder:
    """Epoch-shuffled training view order without replacement."""

    views: np.ndarray
    permutation: np.ndarray
    cursor: int = 0

    @classmethod
    def start(cls, views, rng: np.random.Generator) -> "ViewOrder":
        views = np.asarray(views, dtype=np.int64)
        return cls(views, rng.permutation(views), 0)

    def next(self, rng: np.random.Generator) -> int:
        if self.cursor >= len(self.permutation):
            self.permutation = rng.permutation(self.views)
            self.cursor = 0
        view = int(self.permutation[self.cursor])
        self.cursor += 1
        return view


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    scene: SceneModel
    optimizer: AdamState
    stats: DensifyStats
    iteration: int
    rng_state: dict
    order: ViewOrder
    config_text: str = ""


def _checkpoint_arrays(state: TrainState) -> list[tuple[str, np.ndarray, str]]:
    out = []
    for name in state.scene.row_fields:
        out.append((f"scene.{name}", getattr(state.scene, name), "<f4"))
    for f in PARAM_FIELDS:
        out.append((f"adam.exp_avg.{f}", state.optimizer.exp_avg[f], "<f4"))
        out.append((f"adam.exp_avg_sq.{f}", state.optimizer.exp_avg_sq[f], "<f4"))
    # accumulators are float64 sums and must resume exactly
    for f in ("grad_norm_sum", "weighted_grad_sum", "pixel_count_sum", "sigma"):
        out.append((f"stats.{f}", getattr(state.stats, f), "<f8"))
    out.append(("stats.view_count", state.stats.view_count, "<i8"))
    out.append(("order.views", state.order.views, "<i8"))
    out.append(("order.permutation", state.order.permutation, "<i8"))
    return out


def save_checkpoint(path, state: TrainState) -> None:
    """Write the versioned container: magic, version, JSON manifest, LE arrays."""
    entries, blobs, offset = [], [], 0
    for name, arr, dtype in _checkpoint_arrays(state):
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    opt = state.optimizer
    manifest = {
        "mode": state.scene.mode,
        "generation": state.scene.generation,
        "iteration": state.iteration,
        "order_cursor": state.order.cursor,
        "rng_state": state.rng_state,
        "adam": {"step_count": opt.step_count, "lr": opt.lr, "beta1": opt.beta1,
                 "beta2": opt.beta2, "eps": opt.eps},
        "config": state.config_text,
        "arrays": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ContractViolation(f"{path} is not a checkpoint (bad magic)")
    base = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<II", data, base)
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    start = base + 8
    manifest = json.loads(data[start:start + head_len].decode("utf-8"))
    payload = start + head_len
    arrays = {}
    for e in manifest["arrays"]:
        end = payload + e["offset"] + e["nbytes"]
        if end > len(data):
            raise ContractViolation(f"checkpoint truncated in array {e['name']!r}")
        arr = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=payload + e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float64 if e["dtype"].startswith("<f") else np.int64)
    mode = manifest["mode"]
    scene = SceneModel(mode, **{f: arrays[f"scene.{f}"] for f in PARAM_FIELDS},
                       depth=arrays.get("scene.depth"), generation=manifest["generation"])
    adam = manifest["adam"]
    optimizer = AdamState(
        exp_avg={f: arrays[f"adam.exp_avg.{f}"] for f in PARAM_FIELDS},
        exp_avg_sq={f: arrays[f"adam.exp_avg_sq.{f}"] for f in PARAM_FIELDS},
        step_count={k: int(v) for k, v in adam["step_count"].items()},
        lr={k: float(v) for k, v in adam["lr"].items()},
        generation=scene.generation, beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"],
    )
    stats = DensifyStats(arrays["stats.grad_norm_sum"], arrays["stats.weighted_grad_sum"],
                         arrays["stats.pixel_count_sum"], arrays["stats.view_count"],
                         arrays["stats.sigma"])
    order = ViewOrder(arrays["order.views"], arrays["order.permutation"], manifest["order_cursor"])
    return TrainState(scene, optimizer, stats, manifest["iteration"], manifest["rng_state"],
                      order, manifest["config"])


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------

def write_metrics_csv(path, rows: list[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.iteration, repr(r.psnr), repr(r.ssim), repr(r.l1), r.gaussian_count,
                        f"{r.wall_time:.3f}"])


def read_metrics_csv(path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricReport(psnr=float(r["psnr"]), ssim=float(r["ssim"]), l1=float(r["l1"]),
                         gaussian_count=int(r["gaussians"]), iteration=int(r["iteration"]),
                         wall_time=float(r["wall_time_s"])) for r in rows]


def write_densify_csv(path, rows: list[DensifyReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DENSIFY_HEADER)
        for r in rows:
            w.writerow([r.iteration, repr(r.threshold), r.n_before, r.n_cloned, r.n_split,
                        r.n_pruned, r.n_after])


def read_densify_csv(path) -> list[DensifyReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [DensifyReport(int(r["iteration"]), float(r["threshold"]), int(r["n_before"]),
                          int(r["n_cloned"]), int(r["n_split"]), int(r["n_pruned"]),
                          int(r["n_after"])) for r in rows]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    scene: SceneModel
    metrics: list[MetricReport]
    densify_log: list[DensifyReport]
    optimizer: AdamState
    extent: float
    holdout: list[int]
    last_renders: list[np.ndarray]
    count_trajectory: list[int] = field(default_factory=list)


def position_lr_scale(dataset, config: TrainConfig) -> float:
    if config.position_lr_scale > 0:
        return config.position_lr_scale
    if not config.couple_lr_to_extent:
        return 1.0
    extent = scene_extent_baseline(dataset.cameras)
    return extent if extent > 1e-6 else 1.0


def train(dataset, config: TrainConfig, out_dir=None, resume: TrainState | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Fit a SceneModel to the training views of ``dataset``.

    Iterations are 1-based. With ``out_dir`` the run writes config.txt,
    metrics.csv, densify.csv and checkpoint.bin there. ``stop_at`` ends the
    loop early (the schedule still refers to ``total_iterations``).
    """
    train_ids, holdout_ids = dataset.split(config.holdout_stride)
    if not train_ids:
        raise ContractViolation("training split is empty")
    holdout_ids = holdout_ids or train_ids[:1]
    adc = config.adc
    bg = np.asarray(config.background, dtype=np.float64)
    extent = resolve_extent(adc, dataset.cameras, dataset.sfm_points)
    lr_scale = position_lr_scale(dataset, config)
    rng = np.random.default_rng(config.seed)
    if resume is None:
        scene = initialize(dataset, config, rng)
        scene.quantize_()
        optimizer = AdamState.for_scene(scene, config.learning_rates)
        stats = DensifyStats.zeros(scene.n)
        order = ViewOrder.start(train_ids, rng)
        start = 0
    else:
        scene, optimizer, stats, order = resume.scene, resume.optimizer, resume.stats, resume.order
        rng.bit_generator.state = resume.rng_state
        start = resume.iteration
    end = config.total_iterations if stop_at is None else min(stop_at, config.total_iterations)
    holdout = [(dataset.cameras[i], dataset.images[i]) for i in holdout_ids]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.txt")

    metrics: list[MetricReport] = []
    densify_log: list[DensifyReport] = []
    counts: list[int] = []
    last_renders: list[np.ndarray] = []
    prepared = {}
    t0 = time.perf_counter()

    def state_at(it):
        return TrainState(scene, optimizer, stats, it, rng.bit_generator.state, order, config.to_text())

    for it in range(start + 1, end + 1):
        view = order.next(rng)
        cam, target = dataset.cameras[view], dataset.images[view]
        splats = cull_and_project(scene, cam)
        bundle, rstats = render(splats, cam.width, cam.height, bg)
        if view not in prepared:
            prepared[view] = prepare_target(target)
        _, grad_image = training_loss(bundle.image, target, config.lambda_dssim, prepared[view])
        grads, record = backward(bundle, splats, grad_image, scene, rstats)
        if it <= adc.densify_until:
            stats.accumulate(record, adc, extent, (cam.width, cam.height))
        lr_pos = position_lr_at(it, config.total_iterations, config.lr_position,
                                config.lr_position_final, lr_scale)
        optimizer.step(scene, grads, {"position": lr_pos})
        scene.quantize_()
        optimizer.quantize_()
        if is_densify_step(it, adc):
            stats, rep = densify_and_prune(scene, stats, optimizer, adc, it, extent, rng)
            scene.quantize_()
            optimizer.quantize_()
            densify_log.append(rep)
        if is_reset_step(it, adc):
            opacity_reset(scene, adc, optimizer)
            scene.quantize_()
            optimizer.quantize_()
        counts.append(scene.n)
        if it % config.eval_every == 0 or it == end:
            if it % config.eval_every == 0:
                rep, last_renders = evaluate(scene, holdout, bg, return_renders=True)
                rep.iteration = it
                rep.wall_time = time.perf_counter() - t0
                metrics.append(rep)
                logger.info("iter %d psnr %.3f gaussians %d", it, rep.psnr, scene.n)
            else:
                _, last_renders = evaluate(scene, holdout, bg, return_renders=True)
        if out is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{it:06d}.bin", state_at(it))

    final_state = state_at(end)
    if out is not None:
        write_metrics_csv(out / "metrics.csv", metrics)
        write_densify_csv(out / "densify.csv", densify_log)
        save_checkpoint(out / "checkpoint.bin", final_state)
    return TrainResult(scene, metrics, densify_log, optimizer, extent, holdout_ids, last_renders,
                       counts)
