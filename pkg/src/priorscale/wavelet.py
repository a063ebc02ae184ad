"""Orthonormal 2-D Haar transform, low-frequency extraction and the
low-frequency structure loss with its analytic gradient.

All grids are arrays whose last two axes are (rows, columns); leading axes
(channels, batch) are carried through untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scheduler import NoiseSchedule


@dataclass
class WaveletDecomposition:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    levels: int = 1

    def energy(self) -> float:
        return float(sum(np.sum(np.square(b)) for b in (self.ll, self.lh, self.hl, self.hh)))


def haar_analysis(x: np.ndarray) -> WaveletDecomposition:
    """Single-level Haar analysis over 2x2 blocks ``[[a, b], [c, d]]``."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"haar_analysis needs even spatial dims, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletDecomposition(
        ll=(a + b + c + d) / 2,
        lh=(a - b + c - d) / 2,
        hl=(a + b - c - d) / 2,
        hh=(a - b - c + d) / 2,
    )


def haar_synthesis(d: WaveletDecomposition) -> np.ndarray:
    shape = d.ll.shape
    for name in ("lh", "hl", "hh"):
        if getattr(d, name).shape != shape:
            raise ValueError(f"subband {name} has shape {getattr(d, name).shape}, ll has {shape}")
    out = np.empty(shape[:-2] + (2 * shape[-2], 2 * shape[-1]), dtype=np.result_type(d.ll, d.lh, d.hl, d.hh))
    out[..., 0::2, 0::2] = (d.ll + d.lh + d.hl + d.hh) / 2
    out[..., 0::2, 1::2] = (d.ll - d.lh + d.hl - d.hh) / 2
    out[..., 1::2, 0::2] = (d.ll + d.lh - d.hl - d.hh) / 2
    out[..., 1::2, 1::2] = (d.ll - d.lh - d.hl + d.hh) / 2
    return out


def _check_divisible(shape: tuple[int, ...], levels: int) -> None:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    m = 2**levels
    if shape[-2] % m or shape[-1] % m:
        raise ValueError(f"spatial dims {shape[-2]}x{shape[-1]} not divisible by {m}")


def low_frequency(x: np.ndarray, levels: int = 1) -> np.ndarray:
    """LL subband after ``levels`` recursive analyses."""
    _check_divisible(x.shape, levels)
    for _ in range(levels):
        x = haar_analysis(x).ll
    return x


def low_frequency_adjoint(y: np.ndarray, levels: int = 1) -> np.ndarray:
    """Adjoint of :func:`low_frequency`: embed as LL with zero details and synthesize."""
    for _ in range(levels):
        zero = np.zeros_like(y)
        y = haar_synthesis(WaveletDecomposition(y, zero, zero, zero))
    return y


def _resize_axis(x: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if n == size:
        return x
    # half-pixel centres (align_corners=False), clamped at the borders
    src = (np.arange(size, dtype=np.float64) + 0.5) * (n / size) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = src - i0
    shape = [1] * x.ndim
    shape[axis] = size
    w = w.reshape(shape)
    return np.take(x, i0, axis=axis) * (1.0 - w) + np.take(x, i1, axis=axis) * w


def resize(z: np.ndarray, target_height: int, target_width: int) -> np.ndarray:
    """Bilinear resize of the last two axes."""
    if target_height < 1 or target_width < 1:
        raise ValueError(f"invalid resize target {target_height}x{target_width}")
    out = _resize_axis(z, target_height, z.ndim - 2)
    return _resize_axis(out, target_width, z.ndim - 1)


def _pad_for_levels(x: np.ndarray, levels: int) -> np.ndarray:
    m = 2**levels
    h, w = x.shape[-2:]
    ph, pw = -h % m, -w % m
    if not (ph or pw):
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad, mode="edge")


def _unpad_adjoint(g: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of bottom/right edge replication: fold the padding back in."""
    if g.shape[-2:] == (h, w):
        return g
    g = g.copy()
    g[..., h - 1, :] += g[..., h:, :].sum(axis=-2)
    g = g[..., :h, :]
    g[..., :, w - 1] += g[..., :, w:].sum(axis=-1)
    return g[..., :, :w]


def ll_residual(target_ll: np.ndarray, z0_hat: np.ndarray, levels: int = 1) -> np.ndarray:
    """``LF(z0_hat) - target_ll`` with edge padding for indivisible dims."""
    est = low_frequency(_pad_for_levels(z0_hat, levels), levels)
    if est.shape != target_ll.shape:
        raise ValueError(f"low-frequency shapes differ: {est.shape} vs {target_ll.shape}")
    return est - target_ll


def gsp_loss(z0_low: np.ndarray, z0_hat_high: np.ndarray, levels: int = 1) -> float:
    """Squared-norm distance between the low-frequency parts of two latents.

    ``z0_low`` must already be resized to ``z0_hat_high``'s shape.
    """
    if z0_low.shape != z0_hat_high.shape:
        raise ValueError(f"shape mismatch: {z0_low.shape} vs {z0_hat_high.shape}")
    target_ll = low_frequency(_pad_for_levels(z0_low, levels), levels)
    return float(np.sum(np.square(ll_residual(target_ll, z0_hat_high, levels))))


def gsp_gradient_from_ll(
    target_ll: np.ndarray, z0_hat_high: np.ndarray, t: int, sched: NoiseSchedule, levels: int = 1
) -> np.ndarray:
    """Gradient of the structure loss with respect to the noisy latent at ``t``.

    The noise prediction is held constant, so d(z0_hat)/d(z_t) = 1/sqrt(alpha_bar_t).
    """
    if t < 1:
        raise ValueError("gsp gradient needs t >= 1")
    h, w = z0_hat_high.shape[-2:]
    residual = ll_residual(target_ll, z0_hat_high, levels)
    grad = 2.0 * low_frequency_adjoint(residual, levels)
    return _unpad_adjoint(grad, h, w) / math.sqrt(sched.alpha_bar(t))


def gsp_gradient(
    z0_low: np.ndarray, z0_hat_high: np.ndarray, t: int, sched: NoiseSchedule, levels: int = 1
) -> np.ndarray:
    if z0_low.shape != z0_hat_high.shape:
        raise ValueError(f"shape mismatch: {z0_low.shape} vs {z0_hat_high.shape}")
    target_ll = low_frequency(_pad_for_levels(z0_low, levels), levels)
    return gsp_gradient_from_ll(target_ll, z0_hat_high, t, sched, levels)


def structure_target(z0_low: np.ndarray, height: int, width: int, levels: int = 1) -> np.ndarray:
    """Low-frequency target of the low-resolution latent resized to ``height x width``."""
    return low_frequency(_pad_for_levels(resize(z0_low, height, width), levels), levels)
