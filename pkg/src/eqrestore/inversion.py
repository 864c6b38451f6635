"""Optimising the initial noise ``x_T`` through the solved chain.

Gradients of a loss on ``x_0*`` with respect to ``x_T`` come from the
implicit function theorem at the fixed point: with ``J = dF/dX`` and
``u = dL/dX``, the exact gradient is ``(dF/dx_T)^T (I - J^T)^{-1} u``; the
one-step approximation drops the inverse and uses ``(dF/dx_T)^T u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (InvalidArgumentError, NumericDivergenceError, SingularJacobianError,
                     StaleStateError)
from .sampler import SamplerContext, SamplingState, apply_F_vjp, make_state
from .solver import RootSolveResult, SolverConfig, root_solve

GRADIENT_MODES = ("one_step", "exact_ift")


@dataclass(frozen=True)
class LossSpec:
    """``consistency``: 0.5 ||A x - y||^2. ``reference``: 0.5 ||phi(x) - phi(ref)||^2.

    ``projection`` is an optional linear operator ``phi`` (e.g. a mask or
    grayscale operator) applied to both arguments of the reference loss.
    """

    kind: str = "consistency"
    weight: float = 1.0
    ref: np.ndarray | None = None
    projection: object = None

    def __post_init__(self):
        if self.kind not in ("consistency", "reference"):
            raise InvalidArgumentError(f"unknown loss kind {self.kind!r}")
        if not self.weight > 0:
            raise InvalidArgumentError("loss weight must be > 0")
        if self.kind == "reference" and self.ref is None:
            raise InvalidArgumentError("reference loss needs a reference tensor")


def _residual(x0, obs, spec):
    x0 = np.asarray(x0, dtype=np.float64)
    if spec.kind == "consistency":
        return obs.operator.apply(x0) - obs.y
    ref = np.asarray(spec.ref, dtype=np.float64)
    if ref.shape != x0.shape:
        raise InvalidArgumentError(f"reference shape {ref.shape} != output shape {x0.shape}")
    if spec.projection is not None:
        return spec.projection.apply(x0) - spec.projection.apply(ref)
    return x0 - ref


def loss_eval(x0, obs, spec: LossSpec) -> float:
    r = _residual(x0, obs, spec)
    return float(0.5 * spec.weight * np.vdot(r, r))


def loss_grad_x0(x0, obs, spec: LossSpec):
    r = _residual(x0, obs, spec)
    if spec.kind == "consistency":
        return spec.weight * obs.operator.adjoint(r)
    if spec.projection is not None:
        return spec.weight * spec.projection.adjoint(r)
    return spec.weight * r


# --------------------------------------------------------------------------- generic IFT

def neumann_adjoint_solve(u, vjp_state, tol=1e-13, max_iter=1000):
    """Solve ``w = u + J^T w`` by fixed-point iteration.

    For a strictly lower-triangular chain map ``J^T`` is nilpotent and the
    iteration terminates exactly after at most ``T`` steps.
    """
    w = u
    for _ in range(max_iter):
        w_new = u + vjp_state(w)
        if not np.all(np.isfinite(w_new)):
            raise NumericDivergenceError(_, "adjoint iteration diverged")
        delta = np.max(np.abs(w_new - w)) if np.size(w_new) else 0.0
        w = w_new
        if delta <= tol * max(1.0, float(np.max(np.abs(w)))):
            return w
    raise SingularJacobianError(float("nan"))


def dense_adjoint_solve(u, vjp_state, singular_tol=1e-12):
    """Assemble ``J_g = J - I`` from vjps and solve its transposed system directly."""
    shape = np.shape(u)
    n = int(np.prod(shape))
    jt = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        jt[:, i] = np.asarray(vjp_state(e.reshape(shape))).reshape(-1)   # column i of J^T
    system = np.eye(n) - jt
    smin = np.linalg.svd(system, compute_uv=False)[-1]
    if smin < singular_tol:
        raise SingularJacobianError(smin)
    return np.linalg.solve(system, np.asarray(u).reshape(-1)).reshape(shape)


def implicit_gradient(u, vjp_state, vjp_input, method="neumann"):
    """``(dF/dinput)^T (I - J^T)^{-1} u``."""
    if method == "neumann":
        w = neumann_adjoint_solve(u, vjp_state)
    elif method == "dense":
        w = dense_adjoint_solve(u, vjp_state)
    else:
        raise InvalidArgumentError(f"unknown adjoint method {method!r}")
    return vjp_input(w)


# --------------------------------------------------------------------------- chain gradients

def _check_solved(result: RootSolveResult):
    if result.solve.residual > 10 * result.config.tol:
        raise StaleStateError(f"state residual {result.solve.residual:.3e} exceeds "
                              f"10 x tol ({result.config.tol:.1e})")


def _output_cotangent(result, spec):
    u = np.zeros_like(result.state.states)
    u[-1] = loss_grad_x0(result.x0, result.ctx.obs, spec)
    return u


def grad_xT_one_step(result: RootSolveResult, spec: LossSpec):
    """Direct-dependency gradient (inverse Jacobian replaced by the identity)."""
    _check_solved(result)
    u = _output_cotangent(result, spec)
    return apply_F_vjp(result.state, result.ctx, u)[1]


def grad_xT_exact(result: RootSolveResult, spec: LossSpec, method="neumann", dense_limit=4096):
    """Full implicit-function-theorem gradient."""
    _check_solved(result)
    u = _output_cotangent(result, spec)
    if method == "dense" and u.size > dense_limit:
        raise InvalidArgumentError(f"dense mode limited to {dense_limit} unknowns, got {u.size}")
    state, ctx = result.state, result.ctx
    return implicit_gradient(u, lambda w: apply_F_vjp(state, ctx, w)[0],
                             lambda w: apply_F_vjp(state, ctx, w)[1], method)


def pipeline_loss(x_T, state: SamplingState, ctx: SamplerContext, spec: LossSpec, config: SolverConfig):
    """Loss of the solved chain as a function of ``x_T`` (noises frozen in ``state``)."""
    res = root_solve(ctx, config, x_T=x_T, state=state)
    return loss_eval(res.x0, ctx.obs, spec), res


def exact_solver_config(T, tol=1e-14):
    """Picard with ``T`` iterations solves the triangular chain to rounding error."""
    return SolverConfig(K=T + 1, m=1, tol=tol, method="picard")


def finite_difference_directional(x_T, direction, state, ctx, spec, step=1e-4, config=None):
    """Central difference of ``L(root_solve(x_T))`` along ``direction``."""
    config = config or exact_solver_config(ctx.T)
    hi, _ = pipeline_loss(x_T + step * direction, state, ctx, spec, config)
    lo, _ = pipeline_loss(x_T - step * direction, state, ctx, spec, config)
    return (hi - lo) / (2 * step)


# --------------------------------------------------------------------------- outer loop

@dataclass(frozen=True)
class InversionConfig:
    rate: float = 0.1
    steps: int = 10
    gradient_mode: str = "one_step"
    backtracking: bool = True
    max_backtracks: int = 8
    ascend: bool = False
    warm_start: bool = True
    dense_limit: int = 4096

    def __post_init__(self):
        if self.rate < 0:
            raise InvalidArgumentError("rate must be >= 0")
        if self.steps < 1:
            raise InvalidArgumentError("steps must be >= 1")
        if self.gradient_mode not in GRADIENT_MODES:
            raise InvalidArgumentError(f"unknown gradient mode {self.gradient_mode!r}")


@dataclass
class InversionResult:
    x_T: np.ndarray
    losses: list
    solve: RootSolveResult
    steps: list = field(default_factory=list)
    solves: int = 0

    @property
    def x0(self):
        return self.solve.x0


def invert_init(ctx: SamplerContext, solver_cfg: SolverConfig, inv_cfg: InversionConfig,
                spec: LossSpec, seed=0, state=None) -> InversionResult:
    """Gradient steps on ``x_T`` with frozen noises.

    ``losses[i]`` is the loss after ``i`` updates (length ``steps + 1``).
    The default step is a minimising one; ``ascend=True`` adds the gradient
    as written in the original update rule and disables backtracking.
    """
    if state is None:
        state = make_state(ctx.shape, ctx.T, seed)
    x_T = state.x_T.copy()
    solves = 0

    def solve(xt, init):
        nonlocal solves
        solves += 1
        return root_solve(ctx, solver_cfg, x_T=xt, state=state,
                          init=init if inv_cfg.warm_start else None)

    current = solve(x_T, None)
    loss = loss_eval(current.x0, ctx.obs, spec)
    losses = [loss]
    log = []
    for step in range(inv_cfg.steps):
        if inv_cfg.gradient_mode == "one_step":
            grad = grad_xT_one_step(current, spec)
        else:
            grad = grad_xT_exact(current, spec)
        sign = 1.0 if inv_cfg.ascend else -1.0
        rate = inv_cfg.rate
        trials = 0
        accepted = False
        while True:
            trials += 1
            cand_xT = x_T + sign * rate * grad
            cand = solve(cand_xT, current.state.states)
            cand_loss = loss_eval(cand.x0, ctx.obs, spec)
            if not np.isfinite(cand_loss):
                losses.append(cand_loss)
                raise NumericDivergenceError(step, f"loss became non-finite at step {step}")
            if not inv_cfg.backtracking or inv_cfg.ascend or cand_loss <= loss:
                accepted = True
                break
            if trials > inv_cfg.max_backtracks:
                break
            rate *= 0.5
        if accepted:
            x_T, current, loss = cand_xT, cand, cand_loss
        losses.append(loss)
        log.append({"step": step + 1, "loss": loss, "rate": rate, "trials": trials, "accepted": accepted,
                    "grad_norm": float(np.linalg.norm(grad))})
    return InversionResult(x_T, losses, current, log, solves)
