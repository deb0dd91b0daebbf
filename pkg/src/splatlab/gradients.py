"""Backward pass from a loss-gradient image to raw Gaussian parameters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .core import PARAM_FIELDS, ContractViolation, SceneModel
from .projection import Camera, Splats, cull_and_project, project_backward
from .raster import FrameBundle, blend_order, rasterize_backward, render, render_reference


@dataclass
class ParamGradients:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    logit_opacity: np.ndarray
    color: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def items(self):
        return ((name, getattr(self, name)) for name in PARAM_FIELDS)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for _, g in self.items())

    @classmethod
    def zeros_like(cls, scene: SceneModel) -> "ParamGradients":
        return cls(**{f: np.zeros_like(getattr(scene, f)) for f in PARAM_FIELDS})


@dataclass
class ViewGradRecord:
    """Per-splat quantities of one view, consumed by densification stats."""

    source_index: np.ndarray
    screen_grad: np.ndarray       # (m, 2) dL/dmean2d in pixels
    screen_grad_norm: np.ndarray  # (m,)
    pixel_count: np.ndarray
    weight_sum: np.ndarray
    depth: np.ndarray


def backward(bundle: FrameBundle, splats: Splats, loss_grad_image, scene: SceneModel,
             stats=None) -> tuple[ParamGradients, ViewGradRecord]:
    """Chain the loss gradient through blending, projection and activation.

    ``stats`` is the SplatRenderStats of the same render; when given, the
    record carries its pixel counts and weight sums.
    """
    sg = rasterize_backward(bundle, splats, loss_grad_image)
    raw = project_backward(splats, scene, sg.mean2d, sg.cov2d, sg.opacity, sg.color)
    grads = ParamGradients(**raw)
    if not grads.all_finite():
        raise FloatingPointError("non-finite gradient in backward pass")
    m = len(splats)
    record = ViewGradRecord(
        source_index=splats.source_index.copy(),
        screen_grad=sg.mean2d,
        screen_grad_norm=np.linalg.norm(sg.mean2d, axis=1),
        pixel_count=stats.pixel_count if stats is not None else np.zeros(m, dtype=np.int64),
        weight_sum=stats.weight_sum if stats is not None else np.zeros(m),
        depth=splats.depth.copy(),
    )
    return grads, record


def mse_loss(target):
    """Loss factory: mean squared error against ``target`` with its gradient."""
    target = np.asarray(target, dtype=np.float64)

    def loss(image):
        diff = image - target
        return float(np.mean(diff**2)), 2.0 * diff / diff.size

    return loss


def sum_loss(image):
    return float(image.sum()), np.ones_like(image)


def analytic_gradients(scene: SceneModel, camera: Camera, loss: Callable,
                       background=None, cull: bool = True) -> ParamGradients:
    splats = cull_and_project(scene, camera, cull=cull)
    bundle, stats = render(splats, camera.width, camera.height, background)
    _, grad_image = loss(bundle.image)
    grads, _ = backward(bundle, splats, grad_image, scene, stats)
    return grads


def finite_difference_check(scene: SceneModel, camera: Camera, loss: Callable,
                            param_subset: Iterable[str] | None = None, h: float = 1e-3,
                            background=None, return_details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    Each perturbed loss is evaluated with the naive reference renderer on the
    blending support and depth order of the unperturbed state (same active and
    clamped pixel/splat pairs, same front-to-back order), i.e. on the smooth
    piece that the analytic gradient differentiates. The relative error uses max(|a|, |fd|, 1e-6).
    """
    if h <= 0:
        raise ContractViolation("step h must be positive")
    fields = tuple(param_subset) if param_subset is not None else PARAM_FIELDS
    analytic = analytic_gradients(scene, camera, loss, background, cull=False)
    base_splats = cull_and_project(scene, camera, cull=False)
    _, support = render_reference(base_splats, camera.width, camera.height, background,
                                  return_support=True)
    order = blend_order(base_splats)

    def loss_at(perturbed: SceneModel) -> float:
        sp = cull_and_project(perturbed, camera, cull=False)
        if not np.array_equal(sp.source_index, base_splats.source_index):
            raise ContractViolation("perturbation changed which Gaussians project")
        bundle = render_reference(sp, camera.width, camera.height, background, support=support,
                                  order=order)
        return loss(bundle.image)[0]

    worst = 0.0
    details = []
    for name in fields:
        base = getattr(scene, name)
        a_field = analytic[name]
        for idx in np.ndindex(base.shape):
            plus = scene.copy()
            getattr(plus, name)[idx] += h
            minus = scene.copy()
            getattr(minus, name)[idx] -= h
            fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h)
            a = float(a_field[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            details.append((name, idx, a, fd, rel))
            worst = max(worst, rel)
    if return_details:
        return worst, details
    return worst
