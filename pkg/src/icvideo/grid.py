"""Discrete anisotropic differential operators on video volumes.

A video volume is a float64 ndarray of shape (T, H, W) with axes
(frame, row, column), so the x index is the fastest-varying one.
A vector field holds one (dx, dy, dt) triple per voxel and is stored
as shape (3, T, H, W) with components in that order.

All derivatives are forward finite differences with Neumann boundary
handling: the difference at the last index of each direction is zero.
Divergences are defined as the exact negative adjoints of the
gradients, so <grad u, p> == -<u, div p> holds in exact arithmetic.
The mesh size is 1 in every direction; integrals are plain sums.
"""

from __future__ import annotations

import numpy as np

X, Y, TDIR = 0, 1, 2


def check_volume(u):
    """Validate a video volume: 3D float array, finite entries."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3:
        raise ValueError(f"expected 3D volume (T, H, W), got shape {u.shape}")
    if min(u.shape) < 1:
        raise ValueError(f"all dimensions must be >= 1, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("volume contains non-finite values")
    return u


def forward_diff(u, axis):
    """Forward difference along a volume axis, zero at the last slice."""
    out = np.zeros_like(u)
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    src[axis] = slice(1, None)
    dst[axis] = slice(None, -1)
    out[tuple(dst)] = u[tuple(src)] - u[tuple(dst)]
    return out


def forward_diff_adjoint(p, axis):
    """Exact adjoint of forward_diff (a backward difference with
    boundary rows chosen so <Du, p> == <u, D^T p> holds exactly)."""
    out = np.zeros_like(p)
    n = p.shape[axis]
    if n == 1:
        return out
    first = [slice(None)] * p.ndim
    first[axis] = 0
    last = [slice(None)] * p.ndim
    last[axis] = n - 1
    mid = [slice(None)] * p.ndim
    mid[axis] = slice(1, n - 1)
    lo = [slice(None)] * p.ndim
    lo[axis] = slice(0, n - 2)
    out[tuple(first)] = -p[tuple(first)]
    out[tuple(mid)] = p[tuple(lo)] - p[tuple(mid)]
    out[tuple(last)] = np.take(p, n - 2, axis=axis)
    return out


def grad_kappa(u, kappa):
    """Anisotropic gradient: (kappa*Dx u, kappa*Dy u, (1-kappa)*Dt u).

    kappa may be any finite scalar; values outside [0, 1] are allowed
    (the learner leaves kappa unconstrained and converts afterwards).
    Returns a vector field of shape (3, T, H, W).
    """
    out = np.empty((3,) + u.shape)
    out[X] = kappa * forward_diff(u, 2)
    out[Y] = kappa * forward_diff(u, 1)
    out[TDIR] = (1.0 - kappa) * forward_diff(u, 0)
    return out


def div_kappa(p, kappa):
    """Negative adjoint of grad_kappa: <grad_kappa(u,k), p> == -<u, div_kappa(p,k)>."""
    out = -kappa * forward_diff_adjoint(p[X], 2)
    out -= kappa * forward_diff_adjoint(p[Y], 1)
    out -= (1.0 - kappa) * forward_diff_adjoint(p[TDIR], 0)
    return out


def dkappa_grad(u):
    """Derivative of grad_kappa(u, kappa) with respect to kappa: (Dx u, Dy u, -Dt u)."""
    out = np.empty((3,) + u.shape)
    out[X] = forward_diff(u, 2)
    out[Y] = forward_diff(u, 1)
    out[TDIR] = -forward_diff(u, 0)
    return out


def dkappa_div(p):
    """Negative adjoint of dkappa_grad; equals d/dkappa of div_kappa(p, kappa)."""
    out = -forward_diff_adjoint(p[X], 2)
    out -= forward_diff_adjoint(p[Y], 1)
    out += forward_diff_adjoint(p[TDIR], 0)
    return out


def pointwise_norm(p):
    """Per-voxel two-norm of a vector field, shape (T, H, W)."""
    return np.sqrt(p[X] ** 2 + p[Y] ** 2 + p[TDIR] ** 2)


def norm_21(p):
    """Sum over voxels of the per-voxel two-norm (mesh size 1)."""
    return float(np.sum(pointwise_norm(p)))


def inner(a, b):
    """Euclidean inner product of two arrays of equal shape."""
    return float(np.vdot(a, b))


def operator_norm_estimate(apply, apply_adjoint, shape, iterations=50, seed=0):
    """Estimate ||A||^2 by power iteration on A^T A.

    `apply` maps an ndarray of the given shape to the operator's range;
    `apply_adjoint` maps back. The returned Rayleigh quotient sequence
    is nondecreasing, so the result is a lower bound on the true
    squared norm that tightens with more iterations.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    nx = np.linalg.norm(x)
    if nx == 0.0:
        raise ValueError("initial iterate is zero")
    x /= nx
    est = 0.0
    for _ in range(iterations):
        z = apply_adjoint(apply(x))
        est = float(np.vdot(x, z))
        nz = np.linalg.norm(z)
        if nz == 0.0:
            raise ValueError("power iteration collapsed to the zero vector")
        x = z / nz
    return est
