"""Training-free diffusion restoration solved as a fixed-point system.

The sampling chain of a range-null-space DDIM sampler is written as one
nonlinear system over all intermediate states and solved in parallel with
Anderson acceleration; the initial noise can then be tuned through the
implicit function theorem.
"""
from .denoiser import GmmDenoiser, GmmParams, MlpDenoiser, ZeroDenoiser, load_denoiser, random_gmm
from .errors import (CompositeNotPseudoInvertibleError, DegenerateOperatorError, EqRestoreError,
                     FormatError, InvalidArgumentError, ModelFormatError, NumericDivergenceError,
                     NumericDomainError, SingularJacobianError, StaleStateError)
from .estimator import DeqRestorer, InitOptimizer
from .inversion import InversionConfig, LossSpec, grad_xT_exact, grad_xT_one_step, invert_init
from .metrics import MetricReport, evaluate, psnr, ssim
from .operators import (BlurKernel, BlurOperator, CompositeOperator, DownsampleOperator,
                        GrayscaleOperator, IdentityOperator, MaskOperator, MatrixOperator,
                        build_task_operator, moore_penrose_residuals)
from .sampler import (DegradedObservation, SamplerContext, apply_F, make_state, residual_g,
                      sequential_sample)
from .schedule import build_schedule, prop1_coefficients, select_timesteps
from .solver import SolverConfig, anderson_solve, picard_solve, root_solve

__version__ = "0.1.0"

__all__ = [
    "BlurKernel", "BlurOperator", "CompositeNotPseudoInvertibleError", "CompositeOperator",
    "DegenerateOperatorError", "DegradedObservation", "DeqRestorer", "DownsampleOperator",
    "EqRestoreError", "FormatError", "GmmDenoiser", "GmmParams", "GrayscaleOperator",
    "IdentityOperator", "InitOptimizer", "InvalidArgumentError", "InversionConfig", "LossSpec",
    "MaskOperator", "MatrixOperator", "MetricReport", "MlpDenoiser", "ModelFormatError",
    "NumericDivergenceError", "NumericDomainError", "SamplerContext", "SingularJacobianError",
    "SolverConfig", "StaleStateError", "ZeroDenoiser", "anderson_solve", "apply_F",
    "build_schedule", "build_task_operator", "evaluate", "grad_xT_exact", "grad_xT_one_step",
    "invert_init", "load_denoiser", "make_state", "moore_penrose_residuals", "picard_solve",
    "prop1_coefficients", "psnr", "random_gmm", "residual_g", "root_solve", "select_timesteps",
    "sequential_sample", "ssim",
]
