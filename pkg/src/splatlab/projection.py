"""Camera model and Gaussian-to-splat projection.

Camera convention: right-handed, the camera looks down -z with y up. Pixel
(row i, column j) has its center at (j + 0.5, i + 0.5); u grows to the
right and v grows downward.

Flat mode has no perspective: a flat camera only translates the canvas, so
the splat mean is ``position - center + principal_point``. A flat camera
centered at (W/2, H/2) therefore passes Gaussians through verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    FLAT2D,
    LOGIT_CLAMP,
    ContractViolation,
    SceneModel,
    activate_opacity,
    angle_to_rotation,
    quaternion_to_rotation,
)
from .raster import _splat_half_extents

DILATION = 0.3


@dataclass
class Camera:
    world_to_camera: np.ndarray
    focal: np.ndarray
    principal_point: np.ndarray
    width: int
    height: int
    near_plane: float = 0.01
    image_name: str = ""

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.focal = np.asarray(self.focal, dtype=np.float64).reshape(2)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.near_plane <= 0:
            raise ContractViolation("near_plane must be positive")

    def validate(self, tol: float = 1e-6) -> None:
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=tol, rtol=0) or abs(np.linalg.det(r) - 1) > tol:
            raise ContractViolation("world_to_camera rotation block is not orthonormal")
        if not np.allclose(self.world_to_camera[3], [0, 0, 0, 1], atol=tol, rtol=0):
            raise ContractViolation("world_to_camera is not a rigid transform")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates (translation of the inverse)."""
        return -self.rotation.T @ self.translation

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    @classmethod
    def flat(cls, width: int, height: int, center=None, image_name: str = "") -> "Camera":
        """Canvas-translation camera for flat mode, centered at ``center`` (x, y)."""
        if center is None:
            center = (width / 2.0, height / 2.0)
        w2c = np.eye(4)
        w2c[0, 3] = -float(center[0])
        w2c[1, 3] = -float(center[1])
        return cls(w2c, (1.0, 1.0), (width / 2.0, height / 2.0), width, height,
                   image_name=image_name)

    @classmethod
    def look_at(cls, eye, target, up, focal, width: int, height: int,
                near_plane: float = 0.01, image_name: str = "") -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        back = eye - target
        back /= np.linalg.norm(back)
        right = np.cross(up, back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        rot = np.stack([right, true_up, back])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        focal = np.broadcast_to(np.asarray(focal, dtype=np.float64), (2,))
        return cls(w2c, focal, (width / 2.0, height / 2.0), width, height,
                   near_plane=near_plane, image_name=image_name)


@dataclass
class ProjectionContext:
    """Intermediates kept for the backward pass through projection."""

    mode: str
    camera: Camera
    n_gaussians: int
    scene_generation: int
    rot: np.ndarray              # per-splat rotation matrices
    scale: np.ndarray
    logit: np.ndarray
    quat: np.ndarray | None = None
    t_cam: np.ndarray | None = None
    jac: np.ndarray | None = None
    cov3d: np.ndarray | None = None


@dataclass
class Splats:
    """Structure-of-arrays screen-space splats, in source-index order."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    source_index: np.ndarray = None
    context: ProjectionContext | None = field(default=None, repr=False)

    def __post_init__(self):
        m = len(self.mean2d)
        self.mean2d = np.asarray(self.mean2d, dtype=np.float64).reshape(m, 2)
        self.cov2d = np.asarray(self.cov2d, dtype=np.float64).reshape(m, 2, 2)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(m)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(m)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(m, 3)
        if self.source_index is None:
            self.source_index = np.arange(m)
        self.source_index = np.asarray(self.source_index, dtype=np.int64).reshape(m)

    def __len__(self) -> int:
        return len(self.mean2d)

    def subset(self, index) -> "Splats":
        return Splats(self.mean2d[index], self.cov2d[index], self.depth[index],
                      self.opacity[index], self.color[index], self.source_index[index])


def _visible(mean2d, cov2d, opacity, width, height):
    hx, hy = _splat_half_extents(cov2d, opacity)
    return ((mean2d[:, 0] + hx > 0.0) & (mean2d[:, 0] - hx < width)
            & (mean2d[:, 1] + hy > 0.0) & (mean2d[:, 1] - hy < height)
            & (hx > 0.0))


def cull_and_project(scene: SceneModel, camera: Camera, dilation: float | None = None,
                     cull: bool = True) -> Splats:
    """Project every visible Gaussian of ``scene`` into ``camera``.

    Gaussians behind the near plane, or whose influence rectangle misses
    the image, are dropped. ``dilation`` (px^2) is added to the projected
    covariance diagonal; it defaults to 0.3 in perspective mode and 0 in
    flat mode.
    """
    opacity = activate_opacity(scene.logit_opacity)
    scale = np.exp(scene.log_scale)
    if scene.mode == FLAT2D:
        if dilation is None:
            dilation = 0.0
        rot = angle_to_rotation(scene.rotation[:, 0])
        m = rot * scale[:, None, :]
        cov2d = m @ np.swapaxes(m, 1, 2) + dilation * np.eye(2)
        offset = camera.translation[:2] + camera.principal_point
        mean2d = scene.position + offset
        depth = scene.depth.copy()
        keep = np.ones(scene.n, dtype=bool)
        ctx = dict(rot=rot)
    else:
        if dilation is None:
            dilation = DILATION
        rot = quaternion_to_rotation(scene.rotation)
        quat = scene.rotation / np.linalg.norm(scene.rotation, axis=1, keepdims=True)
        wr = camera.rotation
        t = scene.position @ wr.T + camera.translation
        depth = -t[:, 2]
        keep = depth >= camera.near_plane
        fx, fy = camera.focal
        cx, cy = camera.principal_point
        z = np.where(keep, t[:, 2], -1.0)
        x, y = t[:, 0], t[:, 1]
        mean2d = np.stack([cx - fx * x / z, cy + fy * y / z], axis=1)
        jac = np.zeros((scene.n, 2, 3))
        jac[:, 0, 0] = -fx / z
        jac[:, 0, 2] = fx * x / z**2
        jac[:, 1, 1] = fy / z
        jac[:, 1, 2] = -fy * y / z**2
        m = rot * scale[:, None, :]
        cov3d = m @ np.swapaxes(m, 1, 2)
        tmat = jac @ wr
        cov2d = tmat @ cov3d @ np.swapaxes(tmat, 1, 2) + dilation * np.eye(2)
        ctx = dict(rot=rot, quat=quat, t_cam=t, jac=jac, cov3d=cov3d)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    if cull:
        keep &= _visible(mean2d, cov2d, opacity, camera.width, camera.height)
    idx = np.flatnonzero(keep)
    context = ProjectionContext(
        mode=scene.mode, camera=camera, n_gaussians=scene.n,
        scene_generation=scene.generation, scale=scale[idx],
        logit=scene.logit_opacity[idx], **{k: v[idx] for k, v in ctx.items()})
    return Splats(mean2d[idx], cov2d[idx], depth[idx], opacity[idx], scene.color[idx],
                  idx, context=context)


def _rotation_vjp_quaternion(q, d_rot):
    """Gradient w.r.t. the unit quaternion q given dL/dR, batched."""
    w, x, y, z = q.T
    d = d_rot
    gw = (-2 * z * d[:, 0, 1] + 2 * y * d[:, 0, 2] + 2 * z * d[:, 1, 0]
          - 2 * x * d[:, 1, 2] - 2 * y * d[:, 2, 0] + 2 * x * d[:, 2, 1])
    gx = (2 * y * d[:, 0, 1] + 2 * z * d[:, 0, 2] + 2 * y * d[:, 1, 0] - 4 * x * d[:, 1, 1]
          - 2 * w * d[:, 1, 2] + 2 * z * d[:, 2, 0] + 2 * w * d[:, 2, 1] - 4 * x * d[:, 2, 2])
    gy = (-4 * y * d[:, 0, 0] + 2 * x * d[:, 0, 1] + 2 * w * d[:, 0, 2] + 2 * x * d[:, 1, 0]
          + 2 * z * d[:, 1, 2] - 2 * w * d[:, 2, 0] + 2 * z * d[:, 2, 1] - 4 * y * d[:, 2, 2])
    gz = (-4 * z * d[:, 0, 0] - 2 * w * d[:, 0, 1] + 2 * x * d[:, 0, 2] + 2 * w * d[:, 1, 0]
          - 4 * z * d[:, 1, 1] + 2 * y * d[:, 1, 2] + 2 * x * d[:, 2, 0] + 2 * y * d[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def project_backward(splats: Splats, scene: SceneModel, d_mean2d, d_cov2d, d_opacity, d_color):
    """Pull splat-space gradients back to raw scene parameters.

    Returns a dict of full-size gradient arrays keyed by raw field name.
    """
    ctx = splats.context
    if ctx is None:
        raise ContractViolation("splats carry no projection context")
    if ctx.n_gaussians != scene.n or ctx.scene_generation != scene.generation:
        raise ContractViolation("splats were projected from a different scene state")
    idx = splats.source_index
    grads = {name: np.zeros_like(getattr(scene, name)) for name in
             ("position", "rotation", "log_scale", "logit_opacity", "color")}
    if len(idx) == 0:
        return grads
    g_cov = 0.5 * (d_cov2d + np.swapaxes(d_cov2d, 1, 2))
    rot, scale = ctx.rot, ctx.scale

    if ctx.mode == FLAT2D:
        grads["position"][idx] = d_mean2d
        d_sigma = g_cov
    else:
        cam = ctx.camera
        wr = cam.rotation
        fx, fy = cam.focal
        jac, t = ctx.jac, ctx.t_cam
        x, y, z = t.T
        d_t = np.einsum("nij,ni->nj", jac, d_mean2d)
        tmat = jac @ wr
        cov3d = ctx.cov3d
        d_tmat = 2.0 * g_cov @ tmat @ cov3d
        d_jac = d_tmat @ wr.T
        d_t[:, 0] += d_jac[:, 0, 2] * fx / z**2
        d_t[:, 1] += d_jac[:, 1, 2] * (-fy / z**2)
        d_t[:, 2] += (d_jac[:, 0, 0] * fx / z**2 + d_jac[:, 0, 2] * (-2 * fx * x / z**3)
                      + d_jac[:, 1, 1] * (-fy / z**2) + d_jac[:, 1, 2] * (2 * fy * y / z**3))
        grads["position"][idx] = d_t @ wr
        d_sigma = np.swapaxes(tmat, 1, 2) @ g_cov @ tmat

    m = rot * scale[:, None, :]
    d_m = 2.0 * d_sigma @ m
    d_scale = np.einsum("nji,nji->ni", d_m, rot)
    d_rot = d_m * scale[:, None, :]
    grads["log_scale"][idx] = d_scale * scale
    if ctx.mode == FLAT2D:
        theta_rot = np.stack([np.stack([-rot[:, 1, 0], -rot[:, 0, 0]], -1),
                              np.stack([rot[:, 0, 0], -rot[:, 1, 0]], -1)], 1)
        grads["rotation"][idx, 0] = np.einsum("nij,nij->n", d_rot, theta_rot)
    else:
        d_qhat = _rotation_vjp_quaternion(ctx.quat, d_rot)
        raw = scene.rotation[idx]
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        qhat = ctx.quat
        grads["rotation"][idx] = (d_qhat - qhat * np.sum(qhat * d_qhat, axis=1, keepdims=True)) / norm

    o = splats.opacity
    live = np.abs(ctx.logit) < LOGIT_CLAMP
    grads["logit_opacity"][idx] = d_opacity * o * (1 - o) * live
    grads["color"][idx] = d_color
    return grads
