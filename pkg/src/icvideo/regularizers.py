"""Spatio-temporal regularisation energies and their smoothed derivatives.

Four denoising models are supported. The infimal-convolution (IC) models
split the video u into two parts u = (u - w) + w and penalise each part
with its own anisotropically weighted gradient; the anisotropy weight
kappa is a live parameter. The rigid models penalise the full video with
a fixed spatial term plus a fixed temporal term and carry no kappa.

The smoothed energies replace each 2,1-norm by a Huber-regularised
version plus a small quadratic term, which makes them twice
differentiable; the inner solver works on the unsmoothed energies and the
sensitivity machinery on the smoothed ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import grad_kappa, norm_21, pointwise_norm

MODEL_KINDS = ("ictvtv", "icl2tv", "rigidtvtv", "rigidl2tv")


@dataclass(frozen=True)
class ModelSpec:
    """Choice of regulariser plus smoothing constants.

    kind: one of "ictvtv", "icl2tv", "rigidtvtv", "rigidl2tv".
    gamma: Huber smoothing width (> 0 for smoothed evaluation).
    eps: quadratic smoothing weight (>= 0).
    """

    kind: str
    gamma: float = 0.01
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")

    @property
    def is_ic(self):
        return self.kind.startswith("ic")

    @property
    def quadratic_first_block(self):
        """True for the L2TV variants, whose first term is a plain squared norm."""
        return self.kind.endswith("l2tv")

    def validate_params(self, params):
        if not np.isfinite(params.alpha1) or not np.isfinite(params.alpha2):
            raise ValueError("alpha1/alpha2 must be finite")
        if params.alpha1 < 0 or params.alpha2 < 0:
            raise ValueError("alpha1/alpha2 must be nonnegative")
        if self.is_ic:
            if params.kappa is None:
                raise ValueError(f"model {self.kind} requires kappa")
            if not np.isfinite(params.kappa):
                raise ValueError("kappa must be finite")
        elif params.kappa is not None:
            raise ValueError(f"model {self.kind} takes no kappa")


@dataclass(frozen=True)
class ParamVector:
    """Regularisation weights (alpha1, alpha2) plus kappa for IC models."""

    alpha1: float
    alpha2: float
    kappa: float | None = None

    def as_array(self):
        if self.kappa is None:
            return np.array([self.alpha1, self.alpha2])
        return np.array([self.alpha1, self.alpha2, self.kappa])

    @staticmethod
    def from_array(a):
        vals = [float(v) for v in np.asarray(a).ravel()]
        if len(vals) == 2:
            return ParamVector(vals[0], vals[1])
        if len(vals) == 3:
            return ParamVector(vals[0], vals[1], vals[2])
        raise ValueError(f"expected 2 or 3 entries, got {len(vals)}")


def huber(r, gamma):
    """Huber penalty: |r| - gamma/2 outside the width, quadratic inside."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    r = np.abs(r)
    return np.where(r >= gamma, r - 0.5 * gamma, r**2 / (2.0 * gamma))


def smoothed_norm21(v, gamma, eps):
    """Huberised 2,1-norm of a vector field plus (eps/2) times its squared norm."""
    mags = pointwise_norm(v)
    return float(np.sum(huber(mags, gamma)) + 0.5 * eps * np.sum(v * v))


def smoothed_norm21_grad(v, gamma, eps):
    """Pointwise gradient of smoothed_norm21: v / max(gamma, |v|) + eps*v."""
    mags = pointwise_norm(v)
    return v / np.maximum(gamma, mags) + eps * v


def smoothed_norm21_hess(v, gamma, eps):
    """Pointwise Hessian of smoothed_norm21 as a symmetric 3x3 field.

    Returned shape is (6, T, H, W) with entries (xx, yy, tt, xy, xt, yt).
    Inside the Huber ball the Hessian is (1/gamma + eps) * I; on and
    outside it is I/|v| - v v^T/|v|^3 + eps*I (the boundary uses the
    outer branch).
    """
    mags = pointwise_norm(v)
    outer = mags >= gamma
    # avoid division by zero off the outer branch; values there are overwritten
    r = np.where(outer, mags, 1.0)
    inv_r = np.where(outer, 1.0 / r, 1.0 / gamma)
    inv_r3 = np.where(outer, 1.0 / r**3, 0.0)
    m = np.empty((6,) + v.shape[1:])
    m[0] = inv_r - v[0] * v[0] * inv_r3 + eps
    m[1] = inv_r - v[1] * v[1] * inv_r3 + eps
    m[2] = inv_r - v[2] * v[2] * inv_r3 + eps
    m[3] = -v[0] * v[1] * inv_r3
    m[4] = -v[0] * v[2] * inv_r3
    m[5] = -v[1] * v[2] * inv_r3
    return m


def sym3_apply(m, v):
    """Apply a symmetric 3x3 matrix field to a vector field, pointwise."""
    out = np.empty_like(v)
    out[0] = m[0] * v[0] + m[3] * v[1] + m[4] * v[2]
    out[1] = m[3] * v[0] + m[1] * v[1] + m[5] * v[2]
    out[2] = m[4] * v[0] + m[5] * v[1] + m[2] * v[2]
    return out


def _first_block_field(model, u, w, params):
    """Gradient field entering the alpha1 term, and the one entering alpha2."""
    if model.is_ic:
        k = params.kappa
        return grad_kappa(u - w, k), grad_kappa(w, 1.0 - k)
    return grad_kappa(u, 1.0), grad_kappa(u, 0.0)


def energy_smoothed(model, u, w, params, data):
    """Smoothed objective: data term + Huberised regularisers (+ mean pin for IC).

    For IC models the extra 0.5*(sum w)^2 term removes the additive-constant
    freedom of the split, so minimisers are unique.
    """
    model.validate_params(params)
    if model.is_ic and w is None:
        raise ValueError("IC models require the split component w")
    if not model.is_ic and w is not None:
        raise ValueError("rigid models take no split component")
    gamma, eps = model.gamma, model.eps
    v1, v2 = _first_block_field(model, u, w, params)
    total = 0.5 * float(np.sum((u - data) ** 2))
    if model.quadratic_first_block:
        total += 0.5 * params.alpha1 * float(np.sum(v1 * v1))
    else:
        total += params.alpha1 * smoothed_norm21(v1, gamma, eps)
    total += params.alpha2 * smoothed_norm21(v2, gamma, eps)
    if model.is_ic:
        total += 0.5 * float(np.sum(w)) ** 2
    return total


def energy_unsmoothed(model, u, w, params, data):
    """Exact nonsmooth objective (no Huber, no eps, no mean pin); used for reporting."""
    model.validate_params(params)
    if model.is_ic and w is None:
        raise ValueError("IC models require the split component w")
    if not model.is_ic and w is not None:
        raise ValueError("rigid models take no split component")
    v1, v2 = _first_block_field(model, u, w, params)
    total = 0.5 * float(np.sum((u - data) ** 2))
    if model.quadratic_first_block:
        total += 0.5 * params.alpha1 * float(np.sum(v1 * v1))
    else:
        total += params.alpha1 * norm_21(v1)
    total += params.alpha2 * norm_21(v2)
    return total


def normalize_kappa(model, params):
    """Map a kappa outside [0, 1] to the equivalent triple with kappa in (0, 1).

    The weighted gradient with parameter kappa equals, up to per-component
    sign flips, (2*kappa - 1) times the one with parameter
    kappa/(2*kappa - 1), so rescaling the alphas by |2*kappa - 1| (squared
    for the quadratic L2TV first term) leaves the unsmoothed inner energy
    unchanged. Returns (converted params, True) when a conversion was
    applied and (params, False) otherwise; rigid models are returned
    unchanged.
    """
    if not model.is_ic or params.kappa is None:
        return params, False
    k = params.kappa
    if 0.0 <= k <= 1.0:
        return params, False
    s = 2.0 * k - 1.0
    a1 = params.alpha1 * (s * s if model.quadratic_first_block else abs(s))
    a2 = params.alpha2 * abs(s)
    return ParamVector(a1, a2, k / s), True
