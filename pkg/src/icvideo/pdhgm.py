"""Primal-dual (Chambolle-Pock style) solver for the nonsmooth denoising problems.

The inner problem is solved in saddle-point form

    min_x max_y  G(x) + <A x, y> - F*(y)

where for the IC models x = (u, w), y = (p, q) and A has the block
structure (B1, -B1; 0, B2) with B1 the kappa-weighted gradient and B2 the
(1-kappa)-weighted one. G collects the quadratic data term and, for IC
models, the mean-pinning term 0.5*(sum w)^2. F* is the indicator of the
alpha-scaled dual balls for 2,1-norm blocks and a quadratic for the L2
block of the L2TV variants. The rigid models use a single primal u with
blocks (spatial gradient, temporal derivative).

The squared operator norm of A is below 24 whenever kappa lies in [0, 1],
so the default steps sigma = tau = 1/sqrt(24) satisfy the usual
sigma*tau*||A||^2 < 1 convergence condition strictly. Outside [0, 1] the
norm bound fails, so pdhgm_solve first rewrites such parameters through
the exact conversion kappa -> kappa/(2*kappa - 1) with rescaled alphas,
which lands in (0, 1) and leaves the primal solution unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import div_kappa, grad_kappa, inner, norm_21, pointwise_norm
from .regularizers import ModelSpec, ParamVector, normalize_kappa

STEP_DEFAULT = 1.0 / np.sqrt(24.0)


class DivergenceError(RuntimeError):
    """Raised when solver iterates stop being finite."""


@dataclass
class SaddleState:
    """Iterates of the saddle-point solver.

    u, w: primal variables (w is None for rigid models).
    p, q: dual variables, one per regulariser block.
    u_bar, w_bar: over-relaxed primal copies driving the dual update.
    iteration: number of iterations performed so far.
    sigma, tau: step sizes in effect for the next iteration (they change
        over time only when acceleration is on).
    """

    u: np.ndarray
    w: np.ndarray | None
    p: np.ndarray
    q: np.ndarray
    u_bar: np.ndarray
    w_bar: np.ndarray | None
    iteration: int = 0
    sigma: float = STEP_DEFAULT
    tau: float = STEP_DEFAULT
    # parameters the duals refer to; pdhgm_solve fills this in so callers
    # can evaluate primal_dual_gap consistently after a kappa conversion
    params: ParamVector | None = field(default=None, repr=False)


@dataclass
class SolverConfig:
    iterations: int = 200
    sigma: float | None = None
    tau: float | None = None
    accelerate: bool = False
    warm_start: SaddleState | None = field(default=None, repr=False)

    def steps(self):
        sigma = STEP_DEFAULT if self.sigma is None else float(self.sigma)
        tau = STEP_DEFAULT if self.tau is None else float(self.tau)
        if sigma <= 0 or tau <= 0:
            raise ValueError("step sizes must be positive")
        # the true squared operator norm is strictly below 24, so equality
        # at the default steps still converges
        if sigma * tau * 24.0 > 1.0 + 1e-9:
            raise ValueError("sigma*tau*24 exceeds 1; iteration may diverge")
        return sigma, tau


class SaddleOperator:
    """Forward and adjoint application of the coupling operator A."""

    def __init__(self, model, kappa):
        if model.is_ic:
            if kappa is None:
                raise ValueError("IC saddle operator needs kappa")
            self.kappa = float(kappa)
        else:
            if kappa is not None:
                raise ValueError("rigid saddle operator takes no kappa")
            self.kappa = None
        self.is_ic = model.is_ic

    def apply(self, u, w):
        """A(u, w) -> (first-block field, second-block field)."""
        if self.is_ic:
            k = self.kappa
            return grad_kappa(u - w, k), grad_kappa(w, 1.0 - k)
        return grad_kappa(u, 1.0), grad_kappa(u, 0.0)

    def adjoint(self, p, q):
        """A^T(p, q) -> (u-part, w-part); w-part is None for rigid models."""
        if self.is_ic:
            k = self.kappa
            dp = div_kappa(p, k)
            return -dp, dp - div_kappa(q, 1.0 - k)
        return -div_kappa(p, 1.0) - div_kappa(q, 0.0), None


def build_saddle_operator(model, kappa):
    return SaddleOperator(model, kappa)


def project_ball(p, radius):
    """Pointwise projection of a vector field onto the ball of given radius."""
    if radius <= 0:
        return np.zeros_like(p)
    mags = pointwise_norm(p)
    return p * (radius / np.maximum(mags, radius))


def _dual_prox_first(model, p_trial, alpha1, sigma):
    if model.quadratic_first_block:
        if alpha1 <= 0:
            return np.zeros_like(p_trial)
        return p_trial / (1.0 + sigma / alpha1)
    return project_ball(p_trial, alpha1)


def _pin_prox(w_trial, tau):
    """Prox of tau * 0.5*(sum w)^2: subtracts the right multiple of the mean."""
    total = w_trial.sum()
    return w_trial - tau * total / (1.0 + tau * w_trial.size)


def prox_steps(model, state, f, params, sigma, tau, theta=1.0):
    """One full PDHGM iteration: dual ascent, primal descent, over-relaxation."""
    op = build_saddle_operator(model, params.kappa if model.is_ic else None)
    a1_bar, a2_bar = op.apply(state.u_bar, state.w_bar)
    p = _dual_prox_first(model, state.p + sigma * a1_bar, params.alpha1, sigma)
    q = project_ball(state.q + sigma * a2_bar, params.alpha2)

    atu, atw = op.adjoint(p, q)
    u = (state.u - tau * atu + tau * f) / (1.0 + tau)
    u_bar = u + theta * (u - state.u)
    if model.is_ic:
        w = _pin_prox(state.w - tau * atw, tau)
        w_bar = w + theta * (w - state.w)
    else:
        w = None
        w_bar = None
    return SaddleState(u, w, p, q, u_bar, w_bar, state.iteration + 1, sigma, tau)


def initial_state(model, f, sigma, tau):
    zero_field = np.zeros((3,) + f.shape)
    if model.is_ic:
        w = np.zeros_like(f)
        return SaddleState(f.copy(), w, zero_field.copy(), zero_field.copy(),
                           f.copy(), w.copy(), 0, sigma, tau)
    return SaddleState(f.copy(), None, zero_field.copy(), zero_field.copy(),
                       f.copy(), None, 0, sigma, tau)


def pdhgm_solve(model, f, params, config=None):
    """Run the primal-dual iteration; returns (u, w, final state).

    w is None for rigid models. Warm starting resumes from a previous
    state's iterates and step sizes; `config.iterations` counts the new
    iterations performed in this call. Non-finite iterates raise
    DivergenceError instead of returning garbage.

    An IC kappa outside [0, 1] is converted to the equivalent triple with
    kappa in (0, 1) before iterating, keeping the step-size bound valid.
    The primal solution is the same either way; the returned duals belong
    to the converted operator, recorded on the state as `state.params`.
    """
    if config is None:
        config = SolverConfig()
    model.validate_params(params)
    params, _ = normalize_kappa(model, params)
    sigma, tau = config.steps()
    if config.warm_start is not None:
        state = config.warm_start
        if config.accelerate:
            sigma, tau = state.sigma, state.tau
    else:
        state = initial_state(model, f, sigma, tau)

    theta = 1.0
    for _ in range(config.iterations):
        if config.accelerate:
            # strongly-convex-primal schedule driven by the unit-weight
            # quadratic data term; sound for the rigid models, offered
            # as an option for the IC ones
            theta = 1.0 / np.sqrt(1.0 + 2.0 * tau)
        state = prox_steps(model, state, f, params, sigma, tau, theta)
        if config.accelerate:
            tau = tau * theta
            sigma = sigma / theta
            state.sigma, state.tau = sigma, tau
        if not np.isfinite(state.u).all():
            raise DivergenceError(f"non-finite primal iterate at iteration {state.iteration}")
    state.params = params
    return state.u, state.w, state


def split_components(u, w, kappa):
    """Label the additive parts (u-w, w) of an IC solution.

    Returns (temporal, spatial). The first regulariser block acts on u-w
    with temporal weight 1-kappa, so for kappa <= 0.5 the block pins u-w
    in time and the freely moving part is w; the labels swap for
    kappa > 0.5. The two outputs always sum to u.
    """
    if kappa <= 0.5:
        temporal, spatial = w, u - w
    else:
        temporal, spatial = u - w, w
    return temporal, spatial


def _gap_tv_block(v, y, alpha):
    """F(v) + F*(y) - <v, y> for an alpha-weighted 2,1-norm block."""
    if pointwise_norm(y).max() > alpha * (1.0 + 1e-9) + 1e-15:
        return np.inf
    return alpha * norm_21(v) - inner(v, y)

def _gap_l2_block(v, y, alpha):
    if alpha <= 0:
        return 0.0 if not y.any() else np.inf
    d = alpha * v - y
    return float(np.sum(d * d)) / (2.0 * alpha)


def primal_dual_gap(model, state, f, params):
    """Partial duality gap of the regulariser blocks at the current iterates.

    Sums F_b(B_b x) + F_b*(y_b) - <B_b x, y_b> over the two blocks, which
    is nonnegative for feasible duals and zero exactly at saddle points.
    Infeasible duals (possible only with hand-built states) give +inf.
    """
    op = build_saddle_operator(model, params.kappa if model.is_ic else None)
    v1, v2 = op.apply(state.u, state.w)
    if model.quadratic_first_block:
        g1 = _gap_l2_block(v1, state.p, params.alpha1)
    else:
        g1 = _gap_tv_block(v1, state.p, params.alpha1)
    return g1 + _gap_tv_block(v2, state.q, params.alpha2)
