"""Image losses and quality metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import cv2
import numpy as np
from numba import njit

from .core import ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_CAP = 100.0
DSSIM_WEIGHT = 0.2


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    l1: float
    gaussian_count: int = 0
    iteration: int = 0
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1_loss(a, b) -> float:
    a, b = _check(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _window_for(shape) -> np.ndarray:
    # Images smaller than the window fall back to the largest odd size that fits.
    size = min(SSIM_WINDOW, shape[0], shape[1])
    if size % 2 == 0:
        size -= 1
    return gaussian_window(max(size, 1))


def _blur(x, win):
    # zero-padded separable correlation; the window is symmetric so this is also its adjoint
    if x.shape[2] > 4:
        return np.stack([_blur(x[..., c:c + 1], win)[..., 0] for c in range(x.shape[2])], axis=2)
    out = cv2.sepFilter2D(x, cv2.CV_64F, win, win, borderType=cv2.BORDER_CONSTANT)
    return out.reshape(x.shape)


def _ssim_terms(a, b):
    win = _window_for(a.shape)
    r = len(win) // 2
    h, w = a.shape[:2]
    valid = (slice(r, h - r), slice(r, w - r))
    mu_a = _blur(a, win)
    mu_b = _blur(b, win)
    saa = _blur(a * a, win) - mu_a**2
    sbb = _blur(b * b, win) - mu_b**2
    sab = _blur(a * b, win) - mu_a * mu_b
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num1 = 2 * mu_a * mu_b + c1
    num2 = 2 * sab + c2
    den1 = mu_a**2 + mu_b**2 + c1
    den2 = saa + sbb + c2
    smap = (num1 * num2) / (den1 * den2)
    return win, valid, (mu_a, mu_b, saa, sbb, sab, num1, num2, den1, den2), smap


def ssim(a, b) -> float:
    """Mean SSIM over channels and valid 11x11 Gaussian-window positions."""
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    _, valid, _, smap = _ssim_terms(a, b)
    return float(smap[valid].mean())


@njit(cache=True)
def _products(a, b, aa, ab):
    h, w, ch = a.shape
    for i in range(h):
        for j in range(w):
            for c in range(ch):
                aa[i, j, c] = a[i, j, c] * a[i, j, c]
                ab[i, j, c] = a[i, j, c] * b[i, j, c]


@njit(cache=True)
def _ssim_adjoint(mu_a, mu_b, eaa, ebb, eab, r, c1, c2, d_mu, d_saa, d_sab):
    # SSIM map and its partials w.r.t. (mu_a, sigma_aa, sigma_ab), scaled by 1/n;
    # the partial maps stay zero outside the valid window positions
    h, w, ch = mu_a.shape
    inv_n = 1.0 / ((h - 2 * r) * (w - 2 * r) * ch)
    total = 0.0
    for i in range(r, h - r):
        for j in range(r, w - r):
            for c in range(ch):
                ma = mu_a[i, j, c]
                mb = mu_b[i, j, c]
                saa = eaa[i, j, c] - ma * ma
                sbb = ebb[i, j, c] - mb * mb
                sab = eab[i, j, c] - ma * mb
                num1 = 2.0 * ma * mb + c1
                num2 = 2.0 * sab + c2
                den1 = ma * ma + mb * mb + c1
                den2 = saa + sbb + c2
                s = num1 * num2 / (den1 * den2)
                total += s
                dm = inv_n * (2.0 * mb * num2 / (den1 * den2) - 2.0 * ma * s / den1)
                ds_aa = -inv_n * s / den2
                ds_ab = inv_n * 2.0 * num1 / (den1 * den2)
                # sigma terms expand to blur(x^2) - mu^2 and blur(xy) - mu_a mu_b
                d_mu[i, j, c] = dm - 2.0 * ma * ds_aa - mb * ds_ab
                d_saa[i, j, c] = ds_aa
                d_sab[i, j, c] = ds_ab
    return total * inv_n


@njit(cache=True)
def _combine(a, b, target, g_mu, g_saa, g_sab, lam, out):
    # out = (1 - lam) * dL1/da - lam * dSSIM/da, returns L1
    h, w, ch = a.shape
    inv_n = 1.0 / (h * w * ch)
    l1 = 0.0
    for i in range(h):
        for j in range(w):
            for c in range(ch):
                d = a[i, j, c] - target[i, j, c]
                l1 += abs(d)
                sg = 0.0
                if d > 0:
                    sg = 1.0
                elif d < 0:
                    sg = -1.0
                ds = g_mu[i, j, c] + 2.0 * a[i, j, c] * g_saa[i, j, c] + b[i, j, c] * g_sab[i, j, c]
                out[i, j, c] = (1.0 - lam) * sg * inv_n - lam * ds
    return l1 * inv_n


@dataclass
class PreparedTarget:
    """Target-only SSIM terms, reusable across iterations that fit the same image."""

    image: np.ndarray
    mu: np.ndarray
    second_moment: np.ndarray


def prepare_target(target) -> PreparedTarget:
    b = np.ascontiguousarray(target, dtype=np.float64)
    if b.ndim == 2:
        b = b[..., None]
    win = _window_for(b.shape)
    return PreparedTarget(b, _blur(b, win), _blur(b * b, win))


def _ssim_value_and_partials(a, b, prepared: PreparedTarget | None = None):
    win = _window_for(a.shape)
    r = len(win) // 2
    if prepared is None:
        prepared = prepare_target(b)
    aa, ab = np.empty_like(a), np.empty_like(a)
    _products(a, b, aa, ab)
    d_mu, d_saa, d_sab = np.zeros_like(a), np.zeros_like(a), np.zeros_like(a)
    value = _ssim_adjoint(_blur(a, win), prepared.mu, _blur(aa, win), prepared.second_moment,
                          _blur(ab, win), r, SSIM_K1**2, SSIM_K2**2, d_mu, d_saa, d_sab)
    return value, _blur(d_mu, win), _blur(d_saa, win), _blur(d_sab, win)


def ssim_with_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its gradient with respect to ``a``."""
    a, b = _check(a, b)
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[..., None], b[..., None]
    a, b = np.ascontiguousarray(a), np.ascontiguousarray(b)
    value, g_mu, g_saa, g_sab = _ssim_value_and_partials(a, b)
    grad = g_mu + 2 * a * g_saa + b * g_sab
    return float(value), grad[..., 0] if squeeze else grad


def training_loss(render, target, lam: float = DSSIM_WEIGHT,
                  prepared: PreparedTarget | None = None) -> tuple[float, np.ndarray]:
    """(1 - lam) * L1 + lam * (1 - SSIM) with its gradient w.r.t. ``render``.

    ``prepared`` caches the target's blurred moments (see ``prepare_target``).
    """
    render, target = _check(render, target)
    squeeze = render.ndim == 2
    if squeeze:
        render, target = render[..., None], target[..., None]
    render, target = np.ascontiguousarray(render), np.ascontiguousarray(target)
    if lam == 0:
        s = 1.0
        g_mu = g_saa = g_sab = np.zeros_like(render)
    else:
        s, g_mu, g_saa, g_sab = _ssim_value_and_partials(render, target, prepared)
    grad = np.empty_like(render)
    l1 = _combine(render, target, target, g_mu, g_saa, g_sab, lam, grad)
    if lam == 0:
        l1 = l1_loss(render, target)  # same reduction order as the metric
    loss = (1.0 - lam) * l1 + lam * (1.0 - s)
    return float(loss), grad[..., 0] if squeeze else grad


def report(render, target, **extra) -> MetricReport:
    return MetricReport(psnr=psnr(render, target), ssim=ssim(render, target),
                        l1=l1_loss(render, target), **extra)
