"""Tile-binned front-to-back alpha compositing and its backward pass.

Splats are binned into 16x16 tiles by the exact bounding box of the region
where their alpha can reach the 1/255 skip threshold, so culling never
changes a pixel. Within a tile, splats are ordered by (depth, source index).
Per-splat statistics and gradients are written to per-entry partial slots
(one slot per tile/splat pair) and reduced afterwards in fixed entry order,
which keeps results bit-reproducible under any tile scheduling.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .core import COV_EPS, ContractViolation

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4

# TBB is often missing; the workqueue layer is always available
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

_threads = os.environ.get("SPLATLAB_THREADS")
if _threads:
    numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class FrameBundle:
    image: np.ndarray                # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    weight_total: np.ndarray         # (H, W) sum of blending weights
    background: np.ndarray
    tile_start: np.ndarray | None = None   # (n_tiles + 1,) offsets into entry_splat
    entry_splat: np.ndarray | None = None  # per-tile depth-sorted splat indices
    n_processed: np.ndarray | None = None  # (H, W) end offset of blended entries
    conic: np.ndarray | None = None
    splats: object = None

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class SplatRenderStats:
    pixel_count: np.ndarray  # (m,) pixels where the splat was blended
    weight_sum: np.ndarray   # (m,) sum of its blending weights


@dataclass
class SplatGradients:
    mean2d: np.ndarray
    cov2d: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


def _regularized(cov2d):
    return cov2d + COV_EPS * np.eye(2)


def conics(cov2d: np.ndarray) -> np.ndarray:
    """Inverse covariances packed as (a, b, c) for [[a, b], [b, c]]."""
    cov = _regularized(cov2d)
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    return np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)


def _log_alpha_floor(opacity):
    # Below this exponent o * exp(power) < 1/255 and the pair is skipped.
    with np.errstate(divide="ignore"):
        return np.log(ALPHA_MIN) - np.log(opacity)


def _splat_half_extents(cov2d, opacity):
    """Half-widths of the box where a splat's alpha can reach 1/255."""
    cov = _regularized(cov2d)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(opacity > ALPHA_MIN, 2.0 * np.log(opacity / ALPHA_MIN), 0.0)
    r = np.sqrt(np.maximum(r2, 0.0)) * (1.0 + 1e-4) + 1e-4
    hx = np.where(r2 > 0, r * np.sqrt(cov[:, 0, 0]), 0.0)
    hy = np.where(r2 > 0, r * np.sqrt(cov[:, 1, 1]), 0.0)
    return hx, hy


def _min_quadratic_over_rect(conic, lo_x, hi_x, lo_y, hi_y):
    """Minimum of a dx^2 + 2 b dx dy + c dy^2 over the offset rectangle.

    The form is positive definite, so the minimum is 0 when the rectangle
    contains the origin and otherwise lies on one of the four edges.
    """
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    inside = (lo_x <= 0) & (hi_x >= 0) & (lo_y <= 0) & (hi_y >= 0)
    best = np.full(len(a), np.inf)
    for x in (lo_x, hi_x):
        y = np.clip(-b * x / c, lo_y, hi_y)
        best = np.minimum(best, a * x * x + 2 * b * x * y + c * y * y)
    for y in (lo_y, hi_y):
        x = np.clip(-b * y / a, lo_x, hi_x)
        best = np.minimum(best, a * x * x + 2 * b * x * y + c * y * y)
    return np.where(inside, 0.0, best)


def bin_splats(splats, width: int, height: int, cull: bool = True, conic=None):
    """Assign splats to tiles; returns (tile_start, entry_splat).

    With ``cull`` a splat enters a tile only if its alpha can reach the skip
    threshold at some pixel center of that tile (exact ellipse test against
    the tile's pixel-center rectangle, with a small safety margin).
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    m = len(splats)
    if cull:
        hx, hy = _splat_half_extents(splats.cov2d, splats.opacity)
        mx, my = splats.mean2d[:, 0], splats.mean2d[:, 1]
        x0 = np.ceil(mx - hx - 0.5)
        x1 = np.floor(mx + hx - 0.5)
        y0 = np.ceil(my - hy - 0.5)
        y1 = np.floor(my + hy - 0.5)
        x0 = np.clip(x0, 0, width - 1)
        x1 = np.clip(x1, -1, width - 1)
        y0 = np.clip(y0, 0, height - 1)
        y1 = np.clip(y1, -1, height - 1)
        live = (x1 >= x0) & (y1 >= y0) & (hx > 0) & np.all(np.isfinite(splats.mean2d), axis=1)
        tx0 = np.where(live, x0 // TILE, 0).astype(np.int64)
        tx1 = np.where(live, x1 // TILE, -1).astype(np.int64)
        ty0 = np.where(live, y0 // TILE, 0).astype(np.int64)
        ty1 = np.where(live, y1 // TILE, -1).astype(np.int64)
    else:
        tx0 = np.zeros(m, dtype=np.int64)
        ty0 = np.zeros(m, dtype=np.int64)
        tx1 = np.full(m, tiles_x - 1, dtype=np.int64)
        ty1 = np.full(m, tiles_y - 1, dtype=np.int64)
    nx = np.maximum(tx1 - tx0 + 1, 0)
    ny = np.maximum(ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    ids = np.repeat(np.arange(m), counts)
    starts = np.cumsum(counts) - counts
    off = np.arange(total) - np.repeat(starts, counts)
    nxr = np.repeat(nx, counts)
    tile = (np.repeat(ty0, counts) + off // np.maximum(nxr, 1)) * tiles_x + np.repeat(tx0, counts) + off % np.maximum(nxr, 1)
    if cull and total:
        if conic is None:
            conic = conics(splats.cov2d)
        tx = (tile % tiles_x) * TILE + 0.5
        ty = (tile // tiles_x) * TILE + 0.5
        mx = splats.mean2d[ids, 0]
        my = splats.mean2d[ids, 1]
        q = _min_quadratic_over_rect(conic[ids], tx - mx, np.minimum(tx + TILE - 1, width - 0.5) - mx,
                                     ty - my, np.minimum(ty + TILE - 1, height - 0.5) - my)
        floor = _log_alpha_floor(splats.opacity[ids])
        hit = -0.5 * q >= floor - 1e-6 * (1.0 + np.abs(floor))
        ids, tile = ids[hit], tile[hit]
    order = np.lexsort((splats.source_index[ids], splats.depth[ids], tile))
    entry_splat = ids[order].astype(np.int64)
    tile_start = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=tiles_x * tiles_y), out=tile_start[1:])
    return tile_start, entry_splat


@njit(parallel=True, cache=True)
def _forward_kernel(mean2d, conic, opacity, log_floor, color, tile_start, entry_splat,
                    width, height, tiles_x, bg, image, t_final, n_proc, w_total,
                    e_count, e_weight):
    n_tiles = len(tile_start) - 1
    for tile in prange(n_tiles):
        tx = tile % tiles_x
        ty = tile // tiles_x
        s0 = tile_start[tile]
        s1 = tile_start[tile + 1]
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                fx = px + 0.5
                fy = py + 0.5
                t = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                wsum = 0.0
                last = s0
                for e in range(s0, s1):
                    k = entry_splat[e]
                    dx = fx - mean2d[k, 0]
                    dy = fy - mean2d[k, 1]
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    if power < log_floor[k]:
                        continue
                    alpha = opacity[k] * math.exp(power)
                    if alpha < ALPHA_MIN:
                        continue
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    w = alpha * t
                    r += color[k, 0] * w
                    g += color[k, 1] * w
                    b += color[k, 2] * w
                    wsum += w
                    e_count[e] += 1
                    e_weight[e] += w
                    t = t * (1.0 - alpha)
                    last = e + 1
                    if t < T_MIN:
                        break
                image[py, px, 0] = r + bg[0] * t
                image[py, px, 1] = g + bg[1] * t
                image[py, px, 2] = b + bg[2] * t
                t_final[py, px] = t
                n_proc[py, px] = last
                w_total[py, px] = wsum


@njit(parallel=True, cache=True)
def _backward_kernel(mean2d, conic, opacity, log_floor, color, tile_start, entry_splat,
                     width, height, tiles_x, bg, image, t_final, n_proc, grad_image, e_grad):
    n_tiles = len(tile_start) - 1
    for tile in prange(n_tiles):
        tx = tile % tiles_x
        ty = tile // tiles_x
        s0 = tile_start[tile]
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                fx = px + 0.5
                fy = py + 0.5
                tf = t_final[py, px]
                g0 = grad_image[py, px, 0]
                g1 = grad_image[py, px, 1]
                g2 = grad_image[py, px, 2]
                gbg = g0 * bg[0] * tf + g1 * bg[1] * tf + g2 * bg[2] * tf
                fg0 = image[py, px, 0] - bg[0] * tf
                fg1 = image[py, px, 1] - bg[1] * tf
                fg2 = image[py, px, 2] - bg[2] * tf
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                t = 1.0
                for e in range(s0, n_proc[py, px]):
                    k = entry_splat[e]
                    dx = fx - mean2d[k, 0]
                    dy = fy - mean2d[k, 1]
                    power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
                    if power < log_floor[k]:
                        continue
                    kern = math.exp(power)
                    alpha = opacity[k] * kern
                    if alpha < ALPHA_MIN:
                        continue
                    clamped = alpha > ALPHA_MAX
                    if clamped:
                        alpha = ALPHA_MAX
                    w = alpha * t
                    acc0 += color[k, 0] * w
                    acc1 += color[k, 1] * w
                    acc2 += color[k, 2] * w
                    e_grad[e, 6] += g0 * w
                    e_grad[e, 7] += g1 * w
                    e_grad[e, 8] += g2 * w
                    inv = 1.0 / (1.0 - alpha)
                    d_alpha = (g0 * (color[k, 0] * t - (fg0 - acc0) * inv)
                               + g1 * (color[k, 1] * t - (fg1 - acc1) * inv)
                               + g2 * (color[k, 2] * t - (fg2 - acc2) * inv)
                               - gbg * inv)
                    t = t * (1.0 - alpha)
                    if not clamped:
                        e_grad[e, 5] += d_alpha * kern
                        d_power = d_alpha * alpha
                        e_grad[e, 0] += d_power * (conic[k, 0] * dx + conic[k, 1] * dy)
                        e_grad[e, 1] += d_power * (conic[k, 1] * dx + conic[k, 2] * dy)
                        e_grad[e, 2] += d_power * (-0.5 * dx * dx)
                        e_grad[e, 3] += d_power * (-dx * dy)
                        e_grad[e, 4] += d_power * (-0.5 * dy * dy)


def _background(background):
    if background is None:
        return np.zeros(3)
    return np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()


def render(splats, width: int, height: int, background=None, cull: bool = True):
    """Composite ``splats`` into a (height, width) image.

    Returns (FrameBundle, SplatRenderStats). ``cull=False`` puts every splat
    into every tile; the image must not change.
    """
    bg = _background(background)
    m = len(splats)
    conic = conics(splats.cov2d) if m else np.zeros((0, 3))
    tile_start, entry_splat = bin_splats(splats, width, height, cull=cull, conic=conic)
    log_floor = _log_alpha_floor(splats.opacity)
    image = np.empty((height, width, 3))
    t_final = np.empty((height, width))
    n_proc = np.empty((height, width), dtype=np.int64)
    w_total = np.empty((height, width))
    e_count = np.zeros(len(entry_splat), dtype=np.int64)
    e_weight = np.zeros(len(entry_splat))
    tiles_x = (width + TILE - 1) // TILE
    _forward_kernel(splats.mean2d, conic, splats.opacity, log_floor, splats.color,
                    tile_start, entry_splat, width, height, tiles_x, bg,
                    image, t_final, n_proc, w_total, e_count, e_weight)
    stats = SplatRenderStats(
        pixel_count=np.bincount(entry_splat, weights=e_count, minlength=m).astype(np.int64),
        weight_sum=np.bincount(entry_splat, weights=e_weight, minlength=m),
    )
    bundle = FrameBundle(image, t_final, w_total, bg, tile_start, entry_splat, n_proc,
                         conic, splats)
    return bundle, stats


def rasterize_backward(bundle: FrameBundle, splats, grad_image) -> SplatGradients:
    """Gradients of a scalar loss w.r.t. splat mean, covariance, opacity, color."""
    if bundle.splats is not splats or bundle.entry_splat is None:
        raise ContractViolation("frame bundle was not rendered from these splats")
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != bundle.image.shape:
        raise ContractViolation(f"loss gradient shape {grad_image.shape} != image {bundle.image.shape}")
    m = len(splats)
    e_grad = np.zeros((len(bundle.entry_splat), 9))
    tiles_x = (bundle.width + TILE - 1) // TILE
    _backward_kernel(splats.mean2d, bundle.conic, splats.opacity, _log_alpha_floor(splats.opacity),
                     splats.color, bundle.tile_start, bundle.entry_splat, bundle.width,
                     bundle.height, tiles_x, bundle.background, bundle.image,
                     bundle.final_transmittance, bundle.n_processed, grad_image, e_grad)
    red = np.stack([np.bincount(bundle.entry_splat, weights=e_grad[:, j], minlength=m)
                    for j in range(9)], axis=1) if m else np.zeros((0, 9))
    d_mean = red[:, 0:2]
    ga, gb, gc = red[:, 2], red[:, 3], red[:, 4]
    d_conic = np.empty((m, 2, 2))
    d_conic[:, 0, 0] = ga
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = 0.5 * gb
    d_conic[:, 1, 1] = gc
    a = bundle.conic
    inv = np.empty((m, 2, 2))
    inv[:, 0, 0] = a[:, 0]
    inv[:, 0, 1] = inv[:, 1, 0] = a[:, 1]
    inv[:, 1, 1] = a[:, 2]
    d_cov = -inv @ d_conic @ inv
    return SplatGradients(d_mean, d_cov, red[:, 5], red[:, 6:9])


def blend_order(splats) -> np.ndarray:
    """Front-to-back order: by depth, ties by source index."""
    return np.lexsort((splats.source_index, splats.depth))


def render_reference(splats, width: int, height: int, background=None,
                     support=None, return_support: bool = False, order=None):
    """Naive oracle: every pixel visits every splat in global depth order.

    ``support`` freezes which (pixel, splat) pairs blend and which are
    clamped, keyed by source index (0 inactive, 1 active, 2 clamped); with
    ``order`` (splat positions, front to back) it also freezes the blend
    order. Together they evaluate the smooth piece of the image function
    around a base state.
    """
    bg = _background(background)
    m = len(splats)
    ys, xs = np.mgrid[0:height, 0:width]
    fx = xs.ravel() + 0.5
    fy = ys.ravel() + 0.5
    npx = fx.size
    color = np.zeros((npx, 3))
    t = np.ones(npx)
    wsum = np.zeros(npx)
    done = np.zeros(npx, dtype=bool)
    n_src = int(splats.source_index.max()) + 1 if m else 0
    record = np.zeros((npx, n_src), dtype=np.int8) if return_support else None
    frozen = None if support is None else support.reshape(npx, -1)
    if m:
        conic = conics(splats.cov2d)
        floor = _log_alpha_floor(splats.opacity)
        if order is None:
            order = blend_order(splats)
        for k in order:
            dx = fx - splats.mean2d[k, 0]
            dy = fy - splats.mean2d[k, 1]
            power = -0.5 * (conic[k, 0] * dx * dx + conic[k, 2] * dy * dy) - conic[k, 1] * dx * dy
            alpha = splats.opacity[k] * np.exp(power)
            src = splats.source_index[k]
            if frozen is None:
                active = ~done & (power >= floor[k]) & (alpha >= ALPHA_MIN)
                clamped = active & (alpha > ALPHA_MAX)
            else:
                state = frozen[:, src] if src < frozen.shape[1] else np.zeros(npx, np.int8)
                active = state > 0
                clamped = state == 2
            alpha = np.where(clamped, ALPHA_MAX, np.where(active, alpha, 0.0))
            w = alpha * t
            color += splats.color[k] * w[:, None]
            wsum += w
            t = t * (1.0 - alpha)
            if record is not None:
                record[:, src] = np.where(clamped, 2, np.where(active, 1, 0))
            if frozen is None:
                done |= active & (t < T_MIN)
    image = (color + bg * t[:, None]).reshape(height, width, 3)
    bundle = FrameBundle(image, t.reshape(height, width), wsum.reshape(height, width), bg)
    if return_support:
        return bundle, record.reshape(height, width, n_src)
    return bundle
