"""Reconstruction quality metrics and the outer tracking objective.

Volumes are compared on the [0, 1] intensity convention: PSNR uses peak
1.0 and SSIM uses the standard constants with dynamic range L = 1.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2
_WINDOW = 11
_SIGMA = 1.5


def _check_pair(u, g):
    u = np.asarray(u, dtype=float)
    g = np.asarray(g, dtype=float)
    if u.shape != g.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {g.shape}")
    return u, g


def psnr(u, g):
    """Peak signal-to-noise ratio in dB against peak intensity 1.0.

    Identical inputs return math.inf.
    """
    u, g = _check_pair(u, g)
    mse = float(np.mean((u - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def outer_objective(u, g):
    """Squared tracking error 0.5 * sum((u - g)^2), unit mesh volume."""
    u, g = _check_pair(u, g)
    return 0.5 * float(np.sum((u - g) ** 2))


def _gauss_kernel():
    x = np.arange(_WINDOW) - (_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (x / _SIGMA) ** 2)
    return k / k.sum()


def _local_mean(frame, kernel):
    out = correlate1d(frame, kernel, axis=0, mode="reflect")
    return correlate1d(out, kernel, axis=1, mode="reflect")


def _ssim_frame(a, b):
    h, w = a.shape
    if h < _WINDOW or w < _WINDOW:
        # frame smaller than the window: single uniform full-frame window
        mu_a, mu_b = a.mean(), b.mean()
        var_a = (a * a).mean() - mu_a**2
        var_b = (b * b).mean() - mu_b**2
        cov = (a * b).mean() - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        return num / den
    kernel = _gauss_kernel()
    mu_a = _local_mean(a, kernel)
    mu_b = _local_mean(b, kernel)
    var_a = _local_mean(a * a, kernel) - mu_a**2
    var_b = _local_mean(b * b, kernel) - mu_b**2
    cov = _local_mean(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(u, g):
    """Mean structural similarity over frames.

    Per frame: Gaussian 11x11 window with sigma 1.5, reflected borders,
    C1 = 1e-4 and C2 = 9e-4 on the unit dynamic range. Symmetric in its
    arguments by construction.
    """
    u, g = _check_pair(u, g)
    return float(np.mean([_ssim_frame(u[t], g[t]) for t in range(u.shape[0])]))
