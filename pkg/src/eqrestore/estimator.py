"""Estimator-style front end.

``DeqRestorer`` is training-free: ``fit`` only validates hyper-parameters
and precomputes the schedule, ``transform`` restores a batch of
observations by solving each sampling chain as one fixed-point system.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_batch, check_int, check_interval, check_tensor
from .errors import InvalidArgumentError
from .inversion import InversionConfig, LossSpec, exact_solver_config, invert_init
from .sampler import DegradedObservation, SamplerContext, make_state, sequential_sample
from .schedule import build_schedule, prop1_coefficients, select_timesteps
from .solver import SolverConfig, root_solve


class DeqRestorer(TransformerMixin, BaseEstimator):
    """Restore observations ``y = A x`` with a diffusion prior.

    Parameters
    ----------
    operator : LinearDegradation
    denoiser : Denoiser
    timesteps : int
        Number of sampling steps ``T``.
    iters : int
        Maximum solver iterations ``K``.
    eta : float
        Stochasticity in ``[0, 1)``; fresh noise is drawn once per chain.
    solver : {"anderson", "picard", "sequential"}
    seed : int
        Observation ``i`` of a batch uses ``seed + i``.
    """

    def __init__(self, operator=None, denoiser=None, timesteps=20, iters=15, eta=0.15,
                 solver="anderson", m=5, tol=1e-6, ridge=1e-8, mixing=1.0, seed=0,
                 workers=1, base_len=1000, variant="alpha", noise_ref="previous"):
        self.operator = operator
        self.denoiser = denoiser
        self.timesteps = timesteps
        self.iters = iters
        self.eta = eta
        self.solver = solver
        self.m = m
        self.tol = tol
        self.ridge = ridge
        self.mixing = mixing
        self.seed = seed
        self.workers = workers
        self.base_len = base_len
        self.variant = variant
        self.noise_ref = noise_ref

    def fit(self, X=None, y=None):
        if self.operator is None or self.denoiser is None:
            raise InvalidArgumentError("operator and denoiser are required")
        check_int(self.timesteps, "timesteps")
        check_int(self.iters, "iters")
        check_int(self.workers, "workers")
        check_interval(self.eta, "eta", 0.0, 1.0)
        if self.solver not in ("anderson", "picard", "sequential"):
            raise InvalidArgumentError(f"unknown solver {self.solver!r}")
        self.schedule_ = build_schedule(check_int(self.base_len, "base_len", 2))
        self.plan_ = select_timesteps(self.schedule_, self.timesteps)
        self.coeffs_ = prop1_coefficients(self.schedule_, self.plan_, self.eta,
                                          variant=self.variant, noise_ref=self.noise_ref)
        if self.solver != "sequential":
            self.solver_config_ = SolverConfig(K=self.iters, m=self.m, tol=self.tol, ridge=self.ridge,
                                               mixing=self.mixing, method=self.solver)
        self.n_features_in_ = int(np.prod(self.operator.in_shape))
        return self

    def context(self, y):
        check_is_fitted(self, "coeffs_")
        obs = y if isinstance(y, DegradedObservation) else DegradedObservation(
            check_tensor(y, self.operator.out_shape, "observation"), self.operator)
        return SamplerContext(self.schedule_, self.plan_, self.coeffs_, obs, self.denoiser, self.workers)

    def restore(self, y, seed=None, init=None):
        """Solve one chain. Returns a ``RootSolveResult`` (or ``(x0, trajectory)`` for ``sequential``)."""
        ctx = self.context(y)
        seed = self.seed if seed is None else seed
        try:
            if self.solver == "sequential":
                return sequential_sample(ctx, make_state(ctx.shape, ctx.T, seed))
            return root_solve(ctx, self.solver_config_, seed=seed, init=init)
        finally:
            ctx.close()

    def transform(self, X):
        """Restore a batch of observations shaped ``(n,) + operator.out_shape``."""
        check_is_fitted(self, "coeffs_")
        X = check_batch(X, self.operator.out_shape)
        out = np.empty((X.shape[0],) + tuple(self.operator.in_shape))
        self.results_ = []
        for i, y in enumerate(X):
            res = self.restore(y, seed=self.seed + i)
            self.results_.append(res)
            out[i] = res[0] if self.solver == "sequential" else res.x0
        return out

    predict = transform


class InitOptimizer(BaseEstimator):
    """Tune the initial noise of a fitted ``DeqRestorer`` against a loss.

    ``fit(y, ref=None)`` runs the gradient loop and stores ``x_T_`` and
    ``losses_``; ``transform`` returns the restoration from ``x_T_``.

    ``solver="picard"`` solves each chain with ``T + 1`` Picard sweeps, which
    is exact for the triangular chain map; ``"restorer"`` reuses the
    restorer's own solver budget, and gradients fail with
    ``StaleStateError`` if that budget does not reach its tolerance.
    """

    def __init__(self, restorer=None, loss="consistency", rate=0.1, steps=10,
                 gradient_mode="one_step", backtracking=True, ascend=False, solver="picard"):
        self.restorer = restorer
        self.loss = loss
        self.rate = rate
        self.steps = steps
        self.gradient_mode = gradient_mode
        self.backtracking = backtracking
        self.ascend = ascend
        self.solver = solver

    def fit(self, y, ref=None):
        if self.restorer is None:
            raise InvalidArgumentError("InitOptimizer needs a restorer")
        r = self.restorer
        if not hasattr(r, "coeffs_"):
            r.fit()
        if r.solver == "sequential":
            raise InvalidArgumentError("initialisation optimisation needs a fixed-point solver")
        if self.solver == "picard":
            config = exact_solver_config(r.timesteps, tol=r.tol)
        elif self.solver == "restorer":
            config = r.solver_config_
        else:
            raise InvalidArgumentError(f"unknown solver {self.solver!r}")
        spec = LossSpec(self.loss, ref=ref)
        ctx = r.context(y)
        try:
            result = invert_init(ctx, config,
                                 InversionConfig(rate=self.rate, steps=check_int(self.steps, "steps"),
                                                 gradient_mode=self.gradient_mode,
                                                 backtracking=self.backtracking, ascend=self.ascend),
                                 spec, seed=r.seed)
        finally:
            ctx.close()
        self.result_ = result
        self.x_T_ = result.x_T
        self.losses_ = list(result.losses)
        return self

    def transform(self, y=None):
        check_is_fitted(self, "x_T_")
        return self.result_.x0
