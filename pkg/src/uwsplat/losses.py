"""Image losses and the combined training objective.

total = (1 - lambda_ssim) * L1 + lambda_ssim * D-SSIM + lambda_guide * L_guide

L1 and D-SSIM are mean-reduced so the weights are resolution independent.
The guidance term is the l1 distance of the learned water parameters from
their latest dark-pixel estimates; it contributes zero (flagged) while no
estimate exists. Every loss returns its analytic gradient alongside the
value; gradients are validated against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError
from .scene import MediumParams

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossBreakdown:
    l1: float
    d_ssim: float
    l_bs: float
    total: float
    lambda_ssim: float
    lambda_guide: float
    guidance_present: bool


def l1_loss(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute difference and its subgradient w.r.t. ``a`` (0 at ties)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL_1D = _gaussian_kernel()


def _win_filter(img: np.ndarray) -> np.ndarray:
    """Valid-mode separable Gaussian window filter over (H, W[, C])."""
    r = SSIM_WINDOW // 2
    out = correlate1d(img, _KERNEL_1D, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL_1D, axis=1, mode="constant")
    return out[r:-r, r:-r]

def _win_filter_adjoint(g: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`_win_filter`: embed into zeros, correlate full-size."""
    r = SSIM_WINDOW // 2
    full = np.zeros(shape, dtype=np.float64)
    full[r:-r, r:-r] = g
    out = correlate1d(full, _KERNEL_1D, axis=0, mode="constant")
    return correlate1d(out, _KERNEL_1D, axis=1, mode="constant")


def ssim_value(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over valid 11x11 windows, channel-averaged."""
    v, _ = d_ssim_loss(a, b)
    return 1.0 - v


def d_ssim_loss(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """1 - mean SSIM and its analytic gradient w.r.t. ``a``.

    Window statistics use an 11x11 Gaussian (sigma 1.5), valid windows only,
    stabilizers C1 = 0.01^2 and C2 = 0.03^2 on a [0, 1] dynamic range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DataError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
        b = b[..., None]

    u1 = _win_filter(a)            # E[a]
    u2 = _win_filter(b)            # E[b]
    v1 = _win_filter(a * a)        # E[a^2]
    v2 = _win_filter(b * b)        # E[b^2]
    v12 = _win_filter(a * b)       # E[ab]

    A1 = 2.0 * u1 * u2 + SSIM_C1
    A2 = 2.0 * (v12 - u1 * u2) + SSIM_C2
    B1 = u1 * u1 + u2 * u2 + SSIM_C1
    B2 = (v1 - u1 * u1) + (v2 - u2 * u2) + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    value = 1.0 - float(np.mean(S))

    # d(1 - mean S)/dS per window, then chain through the window moments.
    dS = np.full(S.shape, -1.0 / S.size)
    dS_du1 = (2.0 * u2 * (A2 - A1)) / (B1 * B2) - 2.0 * u1 * S * (1.0 / B1 - 1.0 / B2)
    dS_dv1 = -S / B2
    dS_dv12 = 2.0 * A1 / (B1 * B2)
    grad = _win_filter_adjoint(dS * dS_du1, a.shape)
    grad += 2.0 * a * _win_filter_adjoint(dS * dS_dv1, a.shape)
    grad += b * _win_filter_adjoint(dS * dS_dv12, a.shape)
    if squeeze:
        grad = grad[..., 0]
    return value, grad


def guidance_loss(m: MediumParams) -> Tuple[float, np.ndarray, np.ndarray]:
    """l1 distance of (water_color, backscatter) from their fitted anchors.

    Returns (value, d_water_color, d_backscatter); all zeros when no guidance
    estimate is present. Subgradient at a kink is 0.
    """
    if not m.has_guidance:
        return 0.0, np.zeros(3), np.zeros(3)
    dw = m.water_color.astype(np.float64) - m.water_color_guide.astype(np.float64)
    db = m.backscatter.astype(np.float64) - m.backscatter_guide.astype(np.float64)
    value = float(np.sum(np.abs(dw)) + np.sum(np.abs(db)))
    return value, np.sign(dw), np.sign(db)


def total_loss(rendered: np.ndarray, gt: np.ndarray, medium: Optional[MediumParams],
               lambda_ssim: float = 0.3, lambda_guide: float = 0.1
               ) -> Tuple[LossBreakdown, np.ndarray]:
    """Weighted objective and the fused gradient image dL/d(rendered).

    The guidance term depends only on the medium parameters, so it does not
    appear in the returned pixel gradient; its subgradient is added to the
    medium gradients by the backward pass.
    """
    l1, g1 = l1_loss(rendered, gt)
    ds, gs = d_ssim_loss(rendered, gt)
    if medium is not None:
        lb, _, _ = guidance_loss(medium)
        present = medium.has_guidance
    else:
        lb, present = 0.0, False
    total = (1.0 - lambda_ssim) * l1 + lambda_ssim * ds + lambda_guide * lb
    grad = (1.0 - lambda_ssim) * g1 + lambda_ssim * gs
    return LossBreakdown(l1=l1, d_ssim=ds, l_bs=lb, total=total,
                         lambda_ssim=lambda_ssim, lambda_guide=lambda_guide,
                         guidance_present=present), grad


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped for identical pairs."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 10 ** (-cap / 10.0):
        return cap
    return float(-10.0 * np.log10(mse))
