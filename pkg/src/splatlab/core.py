"""Gaussian primitives, their raw parameterization and kernel evaluation.

A scene stores raw (unconstrained) parameters as one array per field so that
densification and pruning can do bulk row surgery:

    position       (n, 3) world units, or (n, 2) pixels in flat mode
    rotation       (n, 4) quaternion (w, x, y, z), or (n, 1) angle in flat mode
    log_scale      (n, 3) / (n, 2)   scale = exp(log_scale)
    logit_opacity  (n,)              opacity = sigmoid(clamp(logit, +-15))
    color          (n, 3)            plain RGB
    depth          (n,)              flat mode only, not optimized
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FLAT2D = "flat2d"
PERSPECTIVE3D = "perspective3d"
MODES = (FLAT2D, PERSPECTIVE3D)

LOGIT_CLAMP = 15.0
COV_EPS = 1e-8

PARAM_FIELDS = ("position", "rotation", "log_scale", "logit_opacity", "color")


class InvalidParameterError(ValueError):
    """A primitive parameter is outside its valid domain."""


class DegenerateCovarianceError(ArithmeticError):
    """A covariance matrix is singular even after regularization."""


class ContractViolation(ValueError):
    """Inputs violate a documented precondition of an operation."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized first; a zero quaternion raises
    InvalidParameterError.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidParameterError("zero quaternion has no rotation")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def angle_to_rotation(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    r = np.empty(theta.shape + (2, 2))
    r[..., 0, 0] = c
    r[..., 0, 1] = -s
    r[..., 1, 0] = s
    r[..., 1, 1] = c
    return r


def covariance_from(rotation, scale) -> np.ndarray:
    """Build R diag(s)^2 R^T.

    ``rotation`` is a quaternion (4,) for 3D or an angle (scalar or (1,))
    for 2D. Batched inputs with a leading axis are accepted.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    dim = scale.shape[-1]
    if dim == 3:
        r = quaternion_to_rotation(rotation)
    elif dim == 2:
        theta = rotation[..., 0] if rotation.ndim and rotation.shape[-1] == 1 else rotation
        r = angle_to_rotation(theta)
    else:
        raise InvalidParameterError(f"unsupported dimension {dim}")
    m = r * scale[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def kernel_eval(mean, covariance, x, eps: float = COV_EPS) -> float:
    """Unnormalized Gaussian kernel exp(-0.5 d^T (cov + eps I)^-1 d)."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(covariance, dtype=np.float64) + eps * np.eye(len(mean))
    d = np.asarray(x, dtype=np.float64) - mean
    try:
        sol = np.linalg.solve(cov, d)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError("covariance is singular") from exc
    if not np.all(np.isfinite(sol)):
        raise DegenerateCovarianceError("covariance is numerically singular")
    return float(np.exp(-0.5 * d @ sol))


@dataclass
class Activated:
    opacity: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternions, or angles in flat mode


def activate_opacity(logit_opacity):
    return sigmoid(np.clip(logit_opacity, -LOGIT_CLAMP, LOGIT_CLAMP))


def activate(raw) -> Activated:
    """Map raw parameters to (opacity, scale, normalized rotation).

    Accepts a SceneModel or any object with the raw fields.
    """
    rot = np.asarray(raw.rotation, dtype=np.float64)
    if rot.shape[-1] == 4:
        norm = np.linalg.norm(rot, axis=-1, keepdims=True)
        if np.any(norm == 0.0):
            raise InvalidParameterError("zero quaternion has no rotation")
        rot = rot / norm
    return Activated(
        opacity=activate_opacity(np.asarray(raw.logit_opacity, dtype=np.float64)),
        scale=np.exp(np.asarray(raw.log_scale, dtype=np.float64)),
        rotation=rot,
    )


@dataclass
class Gaussian3D:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    logit_opacity: float
    color: np.ndarray


@dataclass
class Gaussian2DFlat:
    position: np.ndarray
    rotation_angle: float
    log_scale: np.ndarray
    depth: float
    logit_opacity: float
    color: np.ndarray


@dataclass
class SceneModel:
    """Growable structure-of-arrays set of Gaussians.

    ``generation`` is bumped by every row mutation so optimizer state can
    detect that it went stale.
    """

    mode: str
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    logit_opacity: np.ndarray
    color: np.ndarray
    depth: np.ndarray | None = None
    generation: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"unknown mode {self.mode!r}")
        dim = 2 if self.mode == FLAT2D else 3
        n = len(self.position)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(n, dim)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 1 if dim == 2 else 4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, dim)
        self.logit_opacity = np.asarray(self.logit_opacity, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        if self.mode == FLAT2D:
            if self.depth is None:
                self.depth = np.zeros(n)
            self.depth = np.asarray(self.depth, dtype=np.float64).reshape(n)
            if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
                raise InvalidParameterError("flat depths must be finite and non-negative")
        else:
            self.depth = None

    @classmethod
    def empty(cls, mode: str) -> "SceneModel":
        dim = 2 if mode == FLAT2D else 3
        return cls(mode, np.zeros((0, dim)), np.zeros((0, 1 if dim == 2 else 4)),
                   np.zeros((0, dim)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D | Gaussian2DFlat]) -> "SceneModel":
        if not gaussians:
            raise ContractViolation("need at least one Gaussian to infer the mode")
        if isinstance(gaussians[0], Gaussian2DFlat):
            return cls(
                FLAT2D,
                np.array([g.position for g in gaussians]),
                np.array([[g.rotation_angle] for g in gaussians]),
                np.array([g.log_scale for g in gaussians]),
                np.array([g.logit_opacity for g in gaussians]),
                np.array([g.color for g in gaussians]),
                depth=np.array([g.depth for g in gaussians]),
            )
        return cls(
            PERSPECTIVE3D,
            np.array([g.position for g in gaussians]),
            np.array([g.rotation for g in gaussians]),
            np.array([g.log_scale for g in gaussians]),
            np.array([g.logit_opacity for g in gaussians]),
            np.array([g.color for g in gaussians]),
        )

    def __len__(self) -> int:
        return len(self.position)

    @property
    def n(self) -> int:
        return len(self.position)

    @property
    def dim(self) -> int:
        return 2 if self.mode == FLAT2D else 3

    @property
    def row_fields(self) -> tuple[str, ...]:
        return PARAM_FIELDS + (("depth",) if self.mode == FLAT2D else ())

    def gaussian(self, i: int) -> Gaussian3D | Gaussian2DFlat:
        if self.mode == FLAT2D:
            return Gaussian2DFlat(self.position[i].copy(), float(self.rotation[i, 0]),
                                  self.log_scale[i].copy(), float(self.depth[i]),
                                  float(self.logit_opacity[i]), self.color[i].copy())
        return Gaussian3D(self.position[i].copy(), self.rotation[i].copy(),
                          self.log_scale[i].copy(), float(self.logit_opacity[i]),
                          self.color[i].copy())

    @property
    def opacity(self) -> np.ndarray:
        return activate_opacity(self.logit_opacity)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def covariances(self) -> np.ndarray:
        return covariance_from(self.rotation, self.scale)

    def copy(self) -> "SceneModel":
        return SceneModel(self.mode, self.position.copy(), self.rotation.copy(),
                          self.log_scale.copy(), self.logit_opacity.copy(), self.color.copy(),
                          depth=None if self.depth is None else self.depth.copy(),
                          generation=self.generation)

    def rows(self, index) -> dict[str, np.ndarray]:
        return {name: getattr(self, name)[index].copy() for name in self.row_fields}

    def append_rows(self, rows: dict[str, np.ndarray]) -> None:
        for name in self.row_fields:
            setattr(self, name, np.concatenate([getattr(self, name), rows[name]], axis=0))
        self.generation += 1

    def keep_rows(self, keep: np.ndarray) -> None:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (self.n,):
            raise ContractViolation(f"keep mask has shape {keep.shape}, scene has {self.n} rows")
        for name in self.row_fields:
            setattr(self, name, getattr(self, name)[keep])
        self.generation += 1

    def quantize_(self, dtype=np.float32) -> None:
        """Round every field to ``dtype`` storage precision in place."""
        for name in self.row_fields:
            setattr(self, name, getattr(self, name).astype(dtype).astype(np.float64))

    def allclose(self, other: "SceneModel", atol: float = 0.0) -> bool:
        if self.mode != other.mode or self.n != other.n:
            return False
        return all(np.allclose(getattr(self, f), getattr(other, f), rtol=0, atol=atol)
                   for f in self.row_fields)
