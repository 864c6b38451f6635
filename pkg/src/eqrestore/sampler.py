"""Sequential restoration sampler and the parallel fixed-point map over the chain.

The chain is stored as a stack whose row ``k`` holds ``x_{T-1-k}``, so row 0
is the first state after the injected noise ``x_T`` and the last row is the
restored image ``x_0``. Fresh-noise draws ``eps_s`` (``s = 1..T``) are frozen
at construction and live in ``noises[s - 1]``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InvalidArgumentError
from .io import seeded_rng, standard_normal
from .operators import LinearDegradation
from .schedule import CoefficientSet, NoiseSchedule, TimestepPlan, prop1_coefficients


@dataclass(frozen=True)
class DegradedObservation:
    y: np.ndarray
    operator: LinearDegradation
    sigma: float = 0.0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != tuple(self.operator.out_shape):
            raise InvalidArgumentError(f"observation shape {y.shape} != operator output {self.operator.out_shape}")
        object.__setattr__(self, "y", y)

    @cached_property
    def pinv_y(self):
        return self.operator.pinv(self.y)

    @classmethod
    def from_clean(cls, x, operator, sigma=0.0, rng=None):
        """``y = A x + sigma * n``; ``rng`` is required when ``sigma > 0``."""
        y = operator.apply(x)
        if sigma > 0:
            if rng is None:
                raise InvalidArgumentError("sigma > 0 needs an rng")
            y = y + sigma * rng.standard_normal(y.shape)
        return cls(y, operator, float(sigma))


@dataclass
class SamplingState:
    states: np.ndarray
    x_T: np.ndarray
    noises: np.ndarray
    seed: int | None = None

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def x0(self):
        return self.states[-1]

    def with_states(self, states):
        return SamplingState(np.asarray(states, dtype=np.float64), self.x_T, self.noises, self.seed)


def make_state(shape, T, seed, x_T=None, init=None) -> SamplingState:
    """Draw ``x_T`` then the ``T`` fresh-noise images from one seeded stream.

    Rows default to copies of ``x_T``; ``init`` (a stack or a single image)
    warm-starts them instead.
    """
    shape = tuple(shape)
    rng = seeded_rng(seed)
    drawn_xT = standard_normal(rng, shape)
    noises = standard_normal(rng, (T,) + shape)
    x_T = drawn_xT if x_T is None else np.asarray(x_T, dtype=np.float64).copy()
    if x_T.shape != shape:
        raise InvalidArgumentError(f"x_T shape {x_T.shape} != {shape}")
    if init is None:
        states = np.broadcast_to(x_T, (T,) + shape).copy()
    else:
        init = np.asarray(init, dtype=np.float64)
        if init.shape == shape:
            init = np.broadcast_to(init, (T,) + shape)
        if init.shape != (T,) + shape:
            raise InvalidArgumentError(f"warm start shape {init.shape} incompatible with {(T,) + shape}")
        states = init.copy()
    return SamplingState(states, x_T, noises, seed)


@dataclass
class SamplerContext:
    """Everything the chain map needs besides the state itself."""

    schedule: NoiseSchedule
    plan: TimestepPlan
    coeffs: CoefficientSet
    obs: DegradedObservation
    denoiser: object
    workers: int = 1
    _pool: ThreadPoolExecutor | None = field(default=None, repr=False)

    @classmethod
    def build(cls, schedule, plan, obs, denoiser, eta=0.0, workers=1, variant="alpha", noise_ref="previous"):
        coeffs = prop1_coefficients(schedule, plan, eta, variant=variant, noise_ref=noise_ref)
        return cls(schedule, plan, coeffs, obs, denoiser, workers)

    @property
    def T(self):
        return self.plan.T

    @property
    def shape(self):
        return self.obs.operator.in_shape

    def map(self, fn, items):
        items = list(items)
        if self.workers <= 1 or len(items) <= 1:
            return [fn(i) for i in items]
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.workers)
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def x0_predict(x_t, abar_t, denoiser, eps=None):
    """Clean-image estimate ``(x_t - sqrt(1 - abar) eps) / sqrt(abar)``."""
    if not 0.0 < abar_t < 1.0:
        raise InvalidArgumentError(f"abar must be in (0, 1), got {abar_t}")
    if eps is None:
        eps = denoiser.eps(x_t, abar_t)
    return (np.asarray(x_t) - np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t)


def project(x0, obs: DegradedObservation):
    """Replace the range component of ``x0`` with ``A^+ y``."""
    return obs.pinv_y + obs.operator.project_null(x0)


def sequential_step(x_s, s, ctx: SamplerContext, noise):
    """One conditioned DDIM step from plan index ``s`` to ``s - 1``."""
    if not 1 <= s <= ctx.T:
        raise InvalidArgumentError(f"step index {s} outside 1..{ctx.T}")
    c = ctx.coeffs
    e = ctx.denoiser.eps(x_s, c.abar[s])
    x0_hat = project(x0_predict(x_s, c.abar[s], None, eps=e), ctx.obs)
    return np.sqrt(c.abar[s - 1]) * x0_hat + c.c2[s] * e + c.c1[s] * noise


def sequential_sample(ctx: SamplerContext, state: SamplingState):
    """Serial rollout from ``state.x_T``; returns ``(x_0, trajectory stack)``."""
    T = ctx.T
    traj = np.empty((T,) + tuple(ctx.shape))
    x = state.x_T
    for k in range(T):
        s = T - k
        x = sequential_step(x, s, ctx, state.noises[s - 1])
        traj[k] = x
    return traj[-1].copy(), traj


def _chain_input(state, s):
    """``x_s`` for plan index ``s`` in ``1..T``."""
    T = state.T
    return state.x_T if s == T else state.states[T - 1 - s]


def _z_term(state, ctx, s):
    c = ctx.coeffs
    P = ctx.obs.operator.project_null
    e = ctx.denoiser.eps(_chain_input(state, s), c.abar[s])
    z = (c.c0_scalar[s] * e + c.c0_operator[s] * P(e)
         + np.sqrt(c.abar[s - 1]) * ctx.obs.pinv_y + c.c1[s] * state.noises[s - 1])
    return z, P(z)


def apply_F(state: SamplingState, ctx: SamplerContext):
    """Evaluate every row of the closed-form chain map from the current state.

    Row for ``x_j`` is
    ``r(j,T) P x_T + A^+A z_{j+1} + sum_{s=j}^{T-1} r(j,s) P z_{s+1}``
    with ``P = I - A^+A`` and ``r(a,b) = sqrt(abar_a / abar_b)``. Exactly ``T``
    denoiser evaluations per call.
    """
    T = ctx.T
    R = ctx.coeffs.ratios
    P_xT = ctx.obs.operator.project_null(state.x_T)
    terms = ctx.map(lambda s: _z_term(state, ctx, s), range(1, T + 1))
    z = [None] + [t[0] for t in terms]
    Pz = [None] + [t[1] for t in terms]

    def row(j):
        acc = R[j, T] * P_xT + (z[j + 1] - Pz[j + 1])
        for s in range(j, T):
            acc = acc + R[j, s] * Pz[s + 1]
        return acc

    rows = ctx.map(row, range(T - 1, -1, -1))
    return np.stack(rows)


def residual_g(state: SamplingState, ctx: SamplerContext):
    return apply_F(state, ctx) - state.states


def apply_F_vjp(state: SamplingState, ctx: SamplerContext, cotangent):
    """Transposed Jacobians of the chain map at ``state``.

    Returns ``(d_states, d_xT)`` for a cotangent stack shaped like the
    output of ``apply_F``. Costs ``T`` denoiser vjps.
    """
    T = ctx.T
    c = ctx.coeffs
    R = c.ratios
    P = ctx.obs.operator.project_null
    cot = np.asarray(cotangent, dtype=np.float64)
    u = {j: cot[T - 1 - j] for j in range(T)}
    Pu = {j: P(u[j]) for j in range(T)}

    def back(q):
        gz = u[q - 1].copy()
        for j in range(q - 1):
            gz = gz + R[j, q - 1] * Pu[j]
        ge = c.c0_scalar[q] * gz + c.c0_operator[q] * P(gz)
        return ctx.denoiser.vjp(_chain_input(state, q), c.abar[q], ge)

    grads = ctx.map(back, range(1, T + 1))
    d_states = np.zeros_like(state.states)
    for q in range(1, T):
        d_states[T - 1 - q] = grads[q - 1]
    d_xT = grads[T - 1].copy()
    for j in range(T):
        d_xT = d_xT + R[j, T] * Pu[j]
    return d_states, d_xT
