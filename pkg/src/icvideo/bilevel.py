"""Outer parameter learning: projected BFGS with multistart.

The outer objective F(params) = 0.5 * ||u(params) - g||^2 evaluates the
inner denoiser against ground truth. Each multistart runs a BFGS loop:
inner solve (warm-started), gradient via the adjoint of the smoothed
optimality system (finite differences for the rigid models), Armijo
backtracking with box projection, curvature-guarded quasi-Hessian
updates, and the relative-step stopping rule. The reported winner is the
start whose final parameters give the best PSNR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import outer_objective, psnr, ssim
from .pdhgm import DivergenceError, SolverConfig, pdhgm_solve
from .regularizers import ParamVector, normalize_kappa
from .sensitivity import KrylovError, SensitivitySolve, grad_outer_objective

SAMPLING_MEANS = {"tvtv": (0.15, 0.15), "l2tv": (3.9, 0.15)}


@dataclass
class OuterConfig:
    armijo_c: float = 1e-4
    stop_rho: float = 1e-8
    max_outer: int = 100
    alpha_box: tuple = (1e-5, 100.0)
    kappa_box: tuple = (-50.0, 50.0)
    starts: int = 100
    seed: int = 0
    kappa_init: tuple = (0.05, 0.95)
    sample_means: tuple | None = None  # default picked by model kind
    inner_iterations: int = 200
    inner_accelerate: bool = False
    sens_tol: float = 1e-8
    sens_maxiter: int | None = None
    preconditioner: str = "jacobi"
    fd_step: float = 1e-4
    min_step: float = 2.0**-30

    def __post_init__(self):
        if not 0 < self.armijo_c < 1:
            raise ValueError("armijo_c must be in (0, 1)")
        if self.stop_rho <= 0:
            raise ValueError("stop_rho must be > 0")
        if self.alpha_box[0] >= self.alpha_box[1] or self.kappa_box[0] >= self.kappa_box[1]:
            raise ValueError("empty constraint box")


@dataclass
class StartTrace:
    """Per-start record: evaluated parameters, objective values, steps."""

    start_params: list
    params: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    step_lengths: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    status: str = "running"
    psnr: float = np.nan
    ssim: float = np.nan


@dataclass
class LearnResult:
    model_kind: str
    params_raw: ParamVector
    params: ParamVector  # kappa mapped into [0, 1]
    converted: bool  # star flag: kappa normalisation was applied
    opt_value: float
    psnr: float
    ssim: float
    seed: int
    selected_start: int
    traces: list
    failed_starts: list
    # denoised volumes of the winning start (w is None for rigid models)
    u: np.ndarray | None = field(default=None, repr=False)
    w: np.ndarray | None = field(default=None, repr=False)


def armijo_search(func, alpha, direction, grad, f0, c=1e-4, project=None,
                  min_step=2.0**-30):
    """Backtracking line search with sufficient-decrease test.

    Tries steps 1, 1/2, 1/4, ... down to `min_step`; trial points are
    projected before evaluation. Returns (step, trial point, trial value)
    or None when `direction` is not a descent direction or no step
    passes.
    """
    slope = float(np.dot(grad, direction))
    if not np.isfinite(slope) or slope >= 0:
        return None
    step = 1.0
    while step >= min_step:
        trial = alpha + step * direction
        if project is not None:
            trial = project(trial)
        f_trial = func(trial)
        if f_trial - f0 <= step * c * slope:
            return step, trial, f_trial
        step *= 0.5
    return None


def bfgs_update(b, s, y):
    """Standard BFGS update of the quasi-Hessian, skipped unless the
    curvature condition <s, y> > 1e-12 ||s|| ||y|| holds (which keeps the
    matrix positive definite)."""
    sy = float(np.dot(s, y))
    if sy <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
        return b
    bs = b @ s
    sbs = float(np.dot(s, bs))
    return b - np.outer(bs, bs) / sbs + np.outer(y, y) / sy


def stop_check(alpha, alpha_prev, rho):
    """Relative-step stopping rule."""
    return bool(np.linalg.norm(alpha - alpha_prev) < rho * np.linalg.norm(alpha))


def default_means(model):
    return SAMPLING_MEANS["l2tv" if model.quadratic_first_block else "tvtv"]


def sample_starts(model, count, seed, means=None, alpha_box=(1e-5, 100.0),
                  kappa_init=(0.05, 0.95)):
    """Chi-squared(3) weights rescaled to the model's target means, plus a
    uniformly drawn kappa for the IC models; everything lands in the box."""
    if means is None:
        means = default_means(model)
    rng = np.random.default_rng(seed)
    starts = []
    for _ in range(count):
        a1 = np.clip(rng.chisquare(3) * means[0] / 3.0, *alpha_box)
        a2 = np.clip(rng.chisquare(3) * means[1] / 3.0, *alpha_box)
        kappa = float(rng.uniform(*kappa_init)) if model.is_ic else None
        starts.append(ParamVector(float(a1), float(a2), kappa))
    return starts


def _projector(model, config):
    def project(a):
        out = a.copy()
        out[0] = np.clip(out[0], *config.alpha_box)
        out[1] = np.clip(out[1], *config.alpha_box)
        if model.is_ic:
            out[2] = np.clip(out[2], *config.kappa_box)
        return out

    return project


def _to_params(model, a):
    if model.is_ic:
        return ParamVector(float(a[0]), float(a[1]), float(a[2]))
    return ParamVector(float(a[0]), float(a[1]))


def _run_start(model, f, g, start, config):
    """One BFGS descent from one start; returns (trace, params, point)."""
    project = _projector(model, config)
    alpha = project(start.as_array())
    trace = StartTrace(start_params=[float(v) for v in alpha])
    sens = SensitivitySolve(tol=config.sens_tol, maxiter=config.sens_maxiter,
                            preconditioner=config.preconditioner)
    state_cell = {}

    def inner_solve(a, warm):
        cfg = SolverConfig(iterations=config.inner_iterations,
                           accelerate=config.inner_accelerate, warm_start=warm)
        u, w, st = pdhgm_solve(model, f, _to_params(model, a), cfg)
        return u, w, st

    u, w, state = inner_solve(alpha, None)
    f_val = outer_objective(u, g)
    trace.params.append([float(v) for v in alpha])
    trace.objectives.append(f_val)

    def gradient(a, point, warm):
        return grad_outer_objective(
            model, f, g, _to_params(model, a), point, mode="adjoint" if model.is_ic else "fd",
            config=sens, inner_iterations=config.inner_iterations,
            warm_state=warm, fd_step=config.fd_step)

    grad = gradient(alpha, (u, w), state)
    b = np.eye(alpha.size) / max(1.0, float(np.linalg.norm(grad)))

    def func(a):
        u_t, w_t, st = inner_solve(a, state)
        state_cell["point"] = (u_t, w_t, st)
        return outer_objective(u_t, g)

    trace.status = "max_iterations"
    for _ in range(config.max_outer):
        direction = np.linalg.solve(b, -grad)
        hit = armijo_search(func, alpha, direction, grad, f_val, c=config.armijo_c,
                            project=project, min_step=config.min_step)
        if hit is None:
            # one steepest-descent retry, then give up on this start
            hit = armijo_search(func, alpha, -grad, grad, f_val, c=config.armijo_c,
                                project=project, min_step=config.min_step)
            if hit is None:
                trace.status = "line_search_failure"
                break
        step, alpha_new, f_new = hit
        u, w, state = state_cell["point"]
        grad_new = gradient(alpha_new, (u, w), state)
        b = bfgs_update(b, alpha_new - alpha, grad_new - grad)
        trace.params.append([float(v) for v in alpha_new])
        trace.objectives.append(f_new)
        trace.step_lengths.append(step)
        trace.accepted.append(True)
        converged = stop_check(alpha_new, alpha, config.stop_rho)
        alpha, f_val, grad = alpha_new, f_new, grad_new
        if converged:
            trace.status = "converged"
            break

    trace.psnr = psnr(u, g)
    trace.ssim = ssim(u, g)
    return trace, _to_params(model, alpha), (u, w)


def learn(model, f, g, config=None):
    """Multistart outer optimisation; returns the PSNR-best LearnResult."""
    if config is None:
        config = OuterConfig()
    if f.shape != g.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {g.shape}")
    starts = sample_starts(model, config.starts, config.seed, config.sample_means,
                           config.alpha_box, config.kappa_init)
    traces = []
    results = []  # (psnr, params array, index, params, point)
    failed = []
    for idx, start in enumerate(starts):
        try:
            trace, params, point = _run_start(model, f, g, start, config)
        except (DivergenceError, KrylovError, RuntimeError) as exc:
            failed.append(idx)
            bad = StartTrace(start_params=[float(v) for v in start.as_array()])
            bad.status = f"failed: {exc}"
            traces.append(bad)
            continue
        traces.append(trace)
        results.append((trace.psnr, tuple(params.as_array()), idx, params, point))

    if not results:
        raise RuntimeError("all multistart runs failed")
    # best PSNR; ties broken by the lexicographically smallest parameters
    results.sort(key=lambda r: (-r[0], r[1]))
    best_psnr, _, best_idx, best_params, best_point = results[0]
    norm_params, converted = normalize_kappa(model, best_params)
    return LearnResult(
        model_kind=model.kind,
        params_raw=best_params,
        params=norm_params,
        converted=converted,
        opt_value=outer_objective(best_point[0], g),
        psnr=best_psnr,
        ssim=traces[best_idx].ssim,
        seed=config.seed,
        selected_start=best_idx,
        traces=traces,
        failed_starts=failed,
        u=best_point[0],
        w=best_point[1],
    )
