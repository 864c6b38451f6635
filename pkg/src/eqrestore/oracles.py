"""Independent numerical checks run by the ``oracle`` command and the test suite.

The closed-form check here deliberately re-derives the parallel chain map
with dense matrices and explicit loops instead of calling ``apply_F``.
"""
from __future__ import annotations

import numpy as np

from .denoiser import GmmDenoiser, random_gmm
from .inversion import (LossSpec, exact_solver_config, finite_difference_directional,
                        grad_xT_exact)
from .operators import (BlurKernel, BlurOperator, CompositeOperator, DownsampleOperator,
                        GrayscaleOperator, MaskOperator, moore_penrose_residuals,
                        random_matrix_operator, stripe_mask)
from .sampler import (DegradedObservation, SamplerContext, make_state, residual_g,
                      sequential_sample)
from .schedule import COEFFICIENT_VARIANTS, build_schedule, prop1_coefficients, select_timesteps
from .solver import root_solve


def dense_matrix(op):
    """Explicit matrix of a linear operator, columns from basis vectors."""
    n = int(np.prod(op.in_shape))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(np.asarray(op.apply(e.reshape(op.in_shape))).reshape(-1))
    return np.stack(cols, axis=1)


def closed_form_dense(A, y, x_T, noises, abar, eta, denoiser, trajectory, variant="alpha",
                      noise_ref="previous"):
    """Right-hand side of the parallel closed form evaluated on ``trajectory``.

    Everything is flat: ``A`` is a matrix, ``trajectory[k]`` holds
    ``x_{T-1-k}``, ``noises[s-1]`` holds the fresh noise of step ``s``.
    """
    T = len(abar) - 1
    n = A.shape[1]
    Ap = np.linalg.pinv(A, rcond=1e-10)
    P = np.eye(n) - Ap @ A
    Apy = Ap @ y

    def x_at(s):
        return x_T if s == T else trajectory[T - 1 - s]

    z = {}
    for s in range(1, T + 1):
        ref = abar[s - 1] if noise_ref == "previous" else abar[s]
        c1 = np.sqrt(1 - ref) * eta
        c2 = np.sqrt(1 - ref) * np.sqrt(1 - eta ** 2)
        alpha_s = abar[s] / abar[s - 1] if variant == "alpha" else abar[s]
        c0 = c2 * np.eye(n) - np.sqrt((1 - abar[s]) / alpha_s) * P
        z[s] = c0 @ denoiser.eps(x_at(s), abar[s]) + np.sqrt(abar[s - 1]) * Apy + c1 * noises[s - 1]
    rows = []
    for k in range(1, T + 1):
        j = T - k
        acc = np.sqrt(abar[j]) / np.sqrt(abar[T]) * (P @ x_T) + (Ap @ A) @ z[j + 1]
        for s in range(j, T):
            acc = acc + np.sqrt(abar[j]) / np.sqrt(abar[s]) * (P @ z[s + 1])
        rows.append(acc)
    return np.stack(rows)


def check_prop1(T=6, dim=32, seed=0, eta=0.15, base_len=1000):
    """Compare the dense closed form with the sequential rollout for each coefficient variant.

    Returns deviations per variant and the variant that matches (``None`` if none does).
    """
    sched = build_schedule(base_len)
    plan = select_timesteps(sched, T)
    op = random_matrix_operator(dim, rank=dim // 2, seed=seed)
    gmm = random_gmm((dim,), n_components=3, seed=seed + 1, variance=0.1, smooth=False)
    den = GmmDenoiser(gmm)
    rng = np.random.default_rng(seed + 2)
    x = gmm.sample(rng)[0]
    obs = DegradedObservation.from_clean(x, op)
    ctx = SamplerContext.build(sched, plan, obs, den, eta=eta)
    state = make_state((dim,), T, seed + 3)
    _, traj = sequential_sample(ctx, state)
    abar = ctx.coeffs.abar
    deviations = {}
    for variant in COEFFICIENT_VARIANTS:
        rhs = closed_form_dense(op.matrix, obs.y, state.x_T, state.noises, abar, eta, den, traj, variant)
        deviations[variant] = float(np.max(np.abs(rhs - traj)))
    fp = float(np.max(np.abs(residual_g(state.with_states(traj), ctx))))
    matches = [v for v in COEFFICIENT_VARIANTS if deviations[v] <= 1e-8]
    return {"T": T, "dim": dim, "deviation": deviations, "apply_F_residual": fp,
            "selected_variant": matches[0] if matches else None}


def select_coefficient_variant(T=6, dim=32, seed=0):
    return check_prop1(T, dim, seed)["selected_variant"]


def shipped_operators(shape=(3, 16, 16)):
    """Every operator family the CLI exposes, on ``shape``."""
    c, h, w = shape
    mask = stripe_mask(h, w)
    return {
        "mask": MaskOperator(mask, channels=c),
        "grayscale": GrayscaleOperator(shape),
        "downsample2": DownsampleOperator(shape, 2),
        "downsample4": DownsampleOperator(shape, 4),
        "blur-gauss": BlurOperator(shape, BlurKernel.gaussian(1.0, 3)),
        "blur-aniso": BlurOperator(shape, BlurKernel.anisotropic(1.5, 0.5, np.pi / 4, 5)),
        "composite": CompositeOperator(MaskOperator(mask, channels=1), GrayscaleOperator(shape)),
        "composite-sr-gray": CompositeOperator(DownsampleOperator((1, h, w), 2), GrayscaleOperator(shape)),
    }


def check_mp(shape=(3, 16, 16), probes=32, seed=0):
    return {name: moore_penrose_residuals(op, probes=probes, seed=seed)
            for name, op in shipped_operators(shape).items()}


def check_fixed_point(T=8, seed=0, eta=0.15, shape=(3, 8, 8)):
    """Sup-norm residual of the chain map at the sequential trajectory, per operator."""
    sched = build_schedule()
    plan = select_timesteps(sched, T)
    gmm = random_gmm(shape, 3, seed)
    den = GmmDenoiser(gmm)
    x = gmm.sample(np.random.default_rng(seed))[0]
    out = {}
    for name, op in shipped_operators(shape).items():
        obs = DegradedObservation.from_clean(x, op)
        ctx = SamplerContext.build(sched, plan, obs, den, eta=eta)
        state = make_state(shape, T, seed + 1)
        _, traj = sequential_sample(ctx, state)
        out[name] = float(np.max(np.abs(residual_g(state.with_states(traj), ctx))))
    return out


def gradient_problem(T=4, dim=16, seed=0, eta=0.15):
    """Small SR-style problem for gradient checks; returns ``(ctx, state, spec)``."""
    side = int(round(np.sqrt(dim)))
    if side * side != dim or side % 2:
        shape, op = (dim,), random_matrix_operator(dim, rank=dim // 2, seed=seed)
    else:
        shape = (1, side, side)
        op = DownsampleOperator(shape, 2)
    gmm = random_gmm(shape, 3, seed, variance=0.1, smooth=False)
    den = GmmDenoiser(gmm)
    rng = np.random.default_rng(seed + 7)
    x = gmm.sample(rng)[0]
    sched = build_schedule()
    plan = select_timesteps(sched, T)
    ctx = SamplerContext.build(sched, plan, DegradedObservation.from_clean(x, op), den, eta=eta)
    state = make_state(shape, T, seed + 11)
    ref = gmm.sample(rng)[0]
    return ctx, state, LossSpec("reference", ref=ref)


def check_gradient(T=4, dim=16, seed=0, directions=8, step=1e-4):
    """Relative error of the exact gradient against central differences of the whole solve."""
    ctx, state, spec = gradient_problem(T, dim, seed)
    res = root_solve(ctx, exact_solver_config(T), state=state)
    grad = grad_xT_exact(res, spec)
    rng = np.random.default_rng(seed + 99)
    errors = []
    for _ in range(directions):
        d = rng.standard_normal(state.x_T.shape)
        d /= np.linalg.norm(d)
        fd = finite_difference_directional(state.x_T, d, state, ctx, spec, step=step)
        an = float(np.vdot(grad, d))
        errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    return {"T": T, "dim": dim, "directions": directions, "max_relative_error": max(errors),
            "relative_errors": errors}
