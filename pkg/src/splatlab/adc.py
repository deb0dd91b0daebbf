"""Adaptive density control: densify (clone/split), prune and opacity reset.

Every decision is switchable through AdcConfig so that the 3DGS baseline,
the pixel-aware variant and the improved variant are presets of one code
path, and ablations toggle single fields.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .core import (
    FLAT2D,
    ContractViolation,
    Gaussian2DFlat,
    Gaussian3D,
    SceneModel,
    activate_opacity,
    angle_to_rotation,
    logit,
    quaternion_to_rotation,
    sigmoid,
)

logger = logging.getLogger(__name__)

CAMERA_BASELINE = "camera_baseline"
SFM_CORRECTED = "sfm_corrected"
CONSTANT = "constant"
EXPONENTIAL = "exponential"
PRUNE_OPACITY = "opacity"
PRUNE_OPACITY_SIZE = "opacity_and_size"
PRUNE_SIGNIFICANCE = "significance"

EXTENT_FLOOR = 1e-6
SPLIT_SCALE = 1.25  # children scale = parent scale * 1.25 / n_children
_LOGIT_LIMIT = 50.0


@dataclass
class AdcConfig:
    use_pixel_aware_grad: bool = False
    use_depth_scaling: bool = False
    depth_gamma: float = 0.37
    use_opacity_correction: bool = False
    extent_mode: str = CAMERA_BASELINE
    threshold_mode: str = CONSTANT
    grad_threshold: float = 2e-4
    threshold_start: float = 1e-4
    threshold_final: float = 4e-4
    prune_mode: str = PRUNE_OPACITY_SIZE
    significance_scope: str = "global"  # or "candidates"
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    n_children: int = 2
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    reset_opacity_value: float = 0.01
    size_prune_factor: float = 0.1
    # screen-gradient units: "half_diagonal" multiplies pixel gradients by half the
    # image diagonal, "ndc" by (W/2, H/2) per axis, "pixel" leaves them unscaled
    grad_scale: str = "half_diagonal"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.threshold_start <= self.threshold_final:
            raise ContractViolation("need 0 < threshold_start <= threshold_final")
        if not 0 < self.min_opacity < 1:
            raise ContractViolation("min_opacity must be in (0, 1)")
        if self.n_children < 2:
            raise ContractViolation("n_children must be at least 2")
        if self.densify_from >= self.densify_until:
            raise ContractViolation("densify_from must be < densify_until")
        if self.densify_interval < 1:
            raise ContractViolation("densify_interval must be positive")
        checks = {
            "extent_mode": (CAMERA_BASELINE, SFM_CORRECTED),
            "threshold_mode": (CONSTANT, EXPONENTIAL),
            "prune_mode": (PRUNE_OPACITY, PRUNE_OPACITY_SIZE, PRUNE_SIGNIFICANCE),
            "significance_scope": ("global", "candidates"),
            "grad_scale": ("half_diagonal", "ndc", "pixel"),
        }
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ContractViolation(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self, prefix: str = "") -> str:
        return "".join(f"{prefix}{k} = {_format_value(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, values: dict) -> "AdcConfig":
        return cls(**coerce_fields(cls, values))

    @classmethod
    def from_text(cls, text: str) -> "AdcConfig":
        return cls.from_dict(parse_key_values(text))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def coerce_fields(cls, values: dict) -> dict:
    """Convert string values to the dataclass field types of ``cls``."""
    defaults = cls()
    known = {f.name for f in fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in known:
            raise ContractViolation(f"unknown {cls.__name__} key {key!r}")
        default = getattr(defaults, key)
        if not isinstance(raw, str):
            out[key] = raw
        elif isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ContractViolation(f"{key}: expected a boolean, got {raw!r}")
            out[key] = raw.lower() in ("true", "1", "yes")
        elif isinstance(default, int):
            out[key] = int(raw)
        elif isinstance(default, float):
            out[key] = float(raw)
        elif isinstance(default, tuple):
            out[key] = tuple(float(x) for x in raw.split(","))
        else:
            out[key] = raw
    return out


def baseline_config(**overrides) -> AdcConfig:
    """Densify-and-prune as in 3DGS."""
    return replace(AdcConfig(), **overrides)


def pixelgs_config(**overrides) -> AdcConfig:
    return replace(AdcConfig(use_pixel_aware_grad=True, use_depth_scaling=True), **overrides)


def ours_config(**overrides) -> AdcConfig:
    cfg = AdcConfig(
        use_pixel_aware_grad=True,
        use_depth_scaling=True,
        use_opacity_correction=True,
        extent_mode=SFM_CORRECTED,
        threshold_mode=EXPONENTIAL,
        prune_mode=PRUNE_SIGNIFICANCE,
    )
    return replace(cfg, **overrides)


PRESETS = {"baseline": baseline_config, "pixelgs": pixelgs_config, "ours": ours_config}


# ---------------------------------------------------------------------------
# scene extent
# ---------------------------------------------------------------------------

def _positions(cameras) -> np.ndarray:
    if len(cameras) == 0:
        raise ContractViolation("scene extent needs at least one camera")
    if hasattr(cameras[0], "position"):
        return np.array([c.position for c in cameras], dtype=np.float64)
    return np.asarray(cameras, dtype=np.float64).reshape(len(cameras), -1)


def camera_center(cameras) -> np.ndarray:
    return _positions(cameras).mean(axis=0)


def scene_extent_baseline(cameras) -> float:
    """1.1 times the largest camera distance from the mean camera position."""
    pos = _positions(cameras)
    center = pos.mean(axis=0)
    return 1.1 * float(np.max(np.linalg.norm(pos - center, axis=1)))


def scene_extent_corrected(cameras, sfm_points) -> float:
    """Mean distance of the SfM points from the mean camera position."""
    center = camera_center(cameras)
    pts = np.asarray(sfm_points, dtype=np.float64)
    if pts.size == 0:
        raise ContractViolation("corrected extent needs a non-empty point cloud")
    pts = pts.reshape(-1, center.shape[0])
    return float(np.mean(np.linalg.norm(pts - center, axis=1)))


def resolve_extent(config: AdcConfig, cameras, sfm_points=None) -> float:
    """Extent selected by ``config.extent_mode``, floored at 1e-6 with a warning."""
    if config.extent_mode == SFM_CORRECTED:
        value = scene_extent_corrected(cameras, sfm_points)
    else:
        value = scene_extent_baseline(cameras)
    if value < EXTENT_FLOOR:
        warnings.warn(f"degenerate scene extent {value:g}; using {EXTENT_FLOOR:g}", RuntimeWarning)
        value = EXTENT_FLOOR
    return value


# ---------------------------------------------------------------------------
# gradient statistics and threshold
# ---------------------------------------------------------------------------

def threshold_at(i: int, config: AdcConfig, i_max: int | None = None) -> float:
    """Densification threshold at iteration ``i``.

    The exponential schedule interpolates ln T linearly from threshold_start
    at i = 0 to threshold_final at i = i_max (densify_until by default).
    """
    if config.threshold_mode == CONSTANT:
        return config.grad_threshold
    if i_max is None:
        i_max = config.densify_until
    frac = min(max(i / i_max, 0.0), 1.0)
    if frac == 0.0:
        return config.threshold_start
    if frac == 1.0:
        return config.threshold_final
    return float(np.exp(np.log(config.threshold_start) * (1 - frac)
                        + np.log(config.threshold_final) * frac))


@dataclass
class DensifyStats:
    grad_norm_sum: np.ndarray
    weighted_grad_sum: np.ndarray
    pixel_count_sum: np.ndarray
    view_count: np.ndarray
    sigma: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n))

    def __len__(self) -> int:
        return len(self.sigma)

    def accumulate(self, record, config: AdcConfig, extent: float,
                   image_size: tuple[int, int] | None = None) -> None:
        """Fold one view's ViewGradRecord into the accumulators.

        ``image_size`` is (width, height), used to convert pixel gradients
        to the units selected by ``config.grad_scale``; None skips scaling.
        """
        idx = record.source_index
        grad = np.asarray(record.screen_grad, dtype=np.float64)
        size = np.asarray(image_size if image_size is not None else (0, 0), dtype=np.float64)
        if image_size is None or config.grad_scale == "pixel":
            pass
        elif config.grad_scale == "half_diagonal":
            grad = grad * (0.5 * float(np.hypot(size[0], size[1])))
        elif config.grad_scale == "ndc":
            grad = grad * (0.5 * size)
        norm = np.linalg.norm(grad, axis=1)
        count = np.asarray(record.pixel_count, dtype=np.float64)
        if config.use_depth_scaling:
            f = np.clip(record.depth / (config.depth_gamma * extent), 0.0, 1.0)
        else:
            f = 1.0
        # source indices are unique within a view, so fancy-index adds are safe
        self.grad_norm_sum[idx] += norm
        self.weighted_grad_sum[idx] += f * count * norm
        self.pixel_count_sum[idx] += count
        self.view_count[idx] += 1
        self.sigma[idx] += record.weight_sum


def gradient_statistic(stats: DensifyStats, config: AdcConfig) -> np.ndarray:
    """Per-Gaussian densification statistic; 0 where nothing was accumulated."""
    if config.use_pixel_aware_grad:
        num, den = stats.weighted_grad_sum, stats.pixel_count_sum
    else:
        num, den = stats.grad_norm_sum, stats.view_count.astype(np.float64)
    out = np.zeros(len(num))
    np.divide(num, den, out=out, where=den > 0)
    return out


# ---------------------------------------------------------------------------
# clone / split
# ---------------------------------------------------------------------------

def corrected_opacity(o_old, n: int = 2):
    """Opacity giving n stacked copies the transmittance of one: 1 - (1 - o)^(1/n)."""
    o_old = np.asarray(o_old, dtype=np.float64)
    out = -np.expm1(np.log1p(-o_old) / n)
    return out if o_old.ndim else float(out)


def _safe_logit(o):
    with np.errstate(divide="ignore"):
        return np.clip(logit(o), -_LOGIT_LIMIT, _LOGIT_LIMIT)


def clone_rows(rows: dict, config: AdcConfig) -> tuple[dict, dict]:
    """Vectorized clone: returns (updated parent rows, child rows)."""
    parent = {k: v.copy() for k, v in rows.items()}
    if config.use_opacity_correction:
        o = corrected_opacity(activate_opacity(parent["logit_opacity"]), 2)
        parent["logit_opacity"] = _safe_logit(o)
    child = {k: v.copy() for k, v in parent.items()}
    return parent, child


def split_rows(rows: dict, config: AdcConfig, rng: np.random.Generator, mode: str) -> dict:
    """Children of every row, ``n_children`` per parent, grouped child-major."""
    n = config.n_children
    scale = np.exp(rows["log_scale"])
    if mode == FLAT2D:
        rot = angle_to_rotation(rows["rotation"][:, 0])
    else:
        rot = quaternion_to_rotation(rows["rotation"])
    children = {k: np.concatenate([v] * n, axis=0) for k, v in rows.items()}
    z = rng.standard_normal(children["position"].shape)
    offsets = np.einsum("nij,nj->ni", np.concatenate([rot] * n), z * np.concatenate([scale] * n))
    children["position"] = children["position"] + offsets
    children["log_scale"] = children["log_scale"] + np.log(SPLIT_SCALE / n)
    if config.use_opacity_correction:
        o = corrected_opacity(activate_opacity(children["logit_opacity"]), n)
        children["logit_opacity"] = _safe_logit(o)
    return children


def _gaussian_rows(g) -> tuple[dict, str]:
    if isinstance(g, Gaussian2DFlat):
        return ({"position": np.asarray(g.position, float)[None], "rotation": np.array([[g.rotation_angle]]),
                 "log_scale": np.asarray(g.log_scale, float)[None], "logit_opacity": np.array([g.logit_opacity]),
                 "color": np.asarray(g.color, float)[None], "depth": np.array([g.depth])}, FLAT2D)
    return ({"position": np.asarray(g.position, float)[None], "rotation": np.asarray(g.rotation, float)[None],
             "log_scale": np.asarray(g.log_scale, float)[None], "logit_opacity": np.array([g.logit_opacity]),
             "color": np.asarray(g.color, float)[None]}, "perspective3d")


def _rows_to_gaussians(rows: dict, mode: str) -> list:
    out = []
    for i in range(len(rows["position"])):
        if mode == FLAT2D:
            out.append(Gaussian2DFlat(rows["position"][i], float(rows["rotation"][i, 0]), rows["log_scale"][i],
                                      float(rows["depth"][i]), float(rows["logit_opacity"][i]), rows["color"][i]))
        else:
            out.append(Gaussian3D(rows["position"][i], rows["rotation"][i], rows["log_scale"][i],
                                  float(rows["logit_opacity"][i]), rows["color"][i]))
    return out


def clone(gaussian, config: AdcConfig):
    """Clone a single Gaussian; returns (parent', child)."""
    rows, mode = _gaussian_rows(gaussian)
    parent, child = clone_rows(rows, config)
    return _rows_to_gaussians(parent, mode)[0], _rows_to_gaussians(child, mode)[0]


def split(gaussian, config: AdcConfig, rng: np.random.Generator) -> list:
    """Replace one Gaussian by ``n_children`` sampled, shrunk children."""
    rows, mode = _gaussian_rows(gaussian)
    return _rows_to_gaussians(split_rows(rows, config, rng, mode), mode)


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def significance_prune_mask(opacity, sigma, min_opacity: float, scope: str = "global") -> np.ndarray:
    """Low-opacity Gaussians whose accumulated weight is in the bottom N_prune.

    N_prune is the number of Gaussians below ``min_opacity``. Membership in
    the bottom N_prune of the sigma multiset is by value: sigma_k qualifies
    when it is at most the N_prune-th smallest sigma, so equal values are
    treated alike regardless of index.
    """
    opacity = np.asarray(opacity, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    cand = opacity < min_opacity
    n_prune = int(cand.sum())
    if n_prune == 0:
        return cand
    pool = sigma if scope == "global" else sigma[cand]
    cutoff = np.partition(pool, n_prune - 1)[n_prune - 1]
    return cand & (sigma <= cutoff)


def select_prune(scene: SceneModel, sigma, config: AdcConfig, extent: float,
                 size_prune: bool = True) -> np.ndarray:
    """Boolean prune mask over the scene rows.

    ``sigma`` is the accumulated blending weight per Gaussian (a DensifyStats
    or an array). ``size_prune`` gates the size criterion of
    opacity_and_size mode.
    """
    if isinstance(sigma, DensifyStats):
        sigma = sigma.sigma
    opacity = scene.opacity
    if config.prune_mode == PRUNE_SIGNIFICANCE:
        return significance_prune_mask(opacity, sigma, config.min_opacity, config.significance_scope)
    mask = opacity < config.min_opacity
    if config.prune_mode == PRUNE_OPACITY_SIZE and size_prune:
        mask |= scene.scale.max(axis=1) > config.size_prune_factor * extent
    return mask


def opacity_reset(scene: SceneModel, config: AdcConfig, optimizer=None) -> None:
    """Clamp every opacity to at most ``reset_opacity_value``.

    When an optimizer is given its opacity moments are zeroed, as the
    reference 3DGS implementation does.
    """
    cap = float(logit(config.reset_opacity_value))
    scene.logit_opacity = np.minimum(scene.logit_opacity, cap)
    if optimizer is not None:
        optimizer.exp_avg["logit_opacity"][:] = 0.0
        optimizer.exp_avg_sq["logit_opacity"][:] = 0.0


# ---------------------------------------------------------------------------
# densify and prune
# ---------------------------------------------------------------------------

@dataclass
class DensifyReport:
    iteration: int
    threshold: float
    n_before: int
    n_cloned: int
    n_split: int
    n_pruned: int
    n_after: int

    @property
    def n_densified(self) -> int:
        return self.n_cloned + self.n_split

    @property
    def n_created(self) -> int:
        return self.n_after - self.n_before + self.n_pruned


def _append(scene: SceneModel, optimizer, rows: dict) -> None:
    k = len(rows["position"])
    scene.append_rows(rows)
    if optimizer is not None:
        optimizer.extend_rows(k, generation=scene.generation)


def _keep(scene: SceneModel, optimizer, keep: np.ndarray) -> None:
    scene.keep_rows(keep)
    if optimizer is not None:
        optimizer.remove_rows(keep, generation=scene.generation)


def densify_and_prune(scene: SceneModel, stats: DensifyStats, optimizer, config: AdcConfig,
                      iteration: int, extent: float, rng: np.random.Generator) -> tuple[DensifyStats, DensifyReport]:
    """One ADC step; mutates ``scene`` and ``optimizer``, returns fresh stats."""
    if len(stats) != scene.n:
        raise ContractViolation(f"stats cover {len(stats)} Gaussians, scene has {scene.n}")
    if optimizer is not None:
        optimizer.check_alignment(scene)
    n_before = scene.n
    tau = gradient_statistic(stats, config)
    threshold = threshold_at(iteration, config)
    selected = tau >= threshold
    big = scene.scale.max(axis=1) > config.percent_dense * extent
    split_mask = selected & big
    clone_mask = selected & ~big
    sigma = stats.sigma.copy()

    clone_idx = np.flatnonzero(clone_mask)
    split_idx = np.flatnonzero(split_mask)
    parents, clones = clone_rows(scene.rows(clone_idx), config)
    for name, values in parents.items():
        getattr(scene, name)[clone_idx] = values
    children = split_rows(scene.rows(split_idx), config, rng, scene.mode)
    new_rows = {k: np.concatenate([clones[k], children[k]]) for k in clones}
    sigma = np.concatenate([sigma, sigma[clone_idx], np.tile(sigma[split_idx], config.n_children)])
    _append(scene, optimizer, new_rows)

    if len(split_idx):
        keep = np.ones(scene.n, dtype=bool)
        keep[split_idx] = False
        _keep(scene, optimizer, keep)
        sigma = sigma[keep]

    size_gate = iteration > config.opacity_reset_interval
    prune = select_prune(scene, sigma, config, extent, size_prune=size_gate)
    n_pruned = int(prune.sum())
    if n_pruned:
        _keep(scene, optimizer, ~prune)
    report = DensifyReport(iteration, threshold, n_before, len(clone_idx), len(split_idx),
                           n_pruned, scene.n)
    logger.debug("densify %s", report)
    return DensifyStats.zeros(scene.n), report


def is_densify_step(iteration: int, config: AdcConfig) -> bool:
    return (config.densify_from <= iteration <= config.densify_until
            and iteration % config.densify_interval == 0)


def is_reset_step(iteration: int, config: AdcConfig) -> bool:
    return (config.opacity_reset_interval > 0 and iteration > 0
            and iteration % config.opacity_reset_interval == 0
            and iteration <= config.densify_until)
