"""Spatio-temporal video denoising with learned regularisation weights.

Volumes are numpy arrays of shape (T, H, W), float64, values nominally
in [0, 1]. See the module docstrings for the solver and learning APIs.
"""

from .bilevel import (
    LearnResult,
    OuterConfig,
    armijo_search,
    bfgs_update,
    learn,
    sample_starts,
    stop_check,
)
from .grid import (
    div_kappa,
    dkappa_div,
    dkappa_grad,
    grad_kappa,
    norm_21,
    operator_norm_estimate,
    pointwise_norm,
)
from .metrics import outer_objective, psnr, ssim
from .pdhgm import (
    DivergenceError,
    SaddleState,
    SolverConfig,
    build_saddle_operator,
    pdhgm_solve,
    primal_dual_gap,
    prox_steps,
    split_components,
)
from .regularizers import (
    ModelSpec,
    ParamVector,
    energy_smoothed,
    energy_unsmoothed,
    huber,
    normalize_kappa,
    smoothed_norm21,
    smoothed_norm21_grad,
    smoothed_norm21_hess,
)
from .sensitivity import (
    KrylovError,
    SensitivitySolve,
    apply_hessian,
    grad_outer_objective,
    kkt_residual,
    sensitivity_rhs,
    solve_adjoint,
    solve_smoothed,
)
from .video_io import (
    NoiseSpec,
    add_noise,
    export_pgm_sequence,
    import_pgm_sequence,
    read_vvol,
    rgb_to_gray_downsample,
    synth_sequence,
    write_vvol,
)

__all__ = [name for name in dir() if not name.startswith("_")]
