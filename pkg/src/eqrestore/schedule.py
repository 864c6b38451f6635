"""Noise schedules, timestep subsequences and step coefficients.

Plan indices run ``s = 0..T`` with ``s = 0`` the clean end (``abar = 1``)
and ``s = T`` the pure-noise end. Per-step arrays are stored with length
``T + 1`` so they can be indexed by ``s`` directly; entry 0 is unused.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

COEFFICIENT_VARIANTS = ("alpha", "alpha_bar")
NOISE_REFS = ("previous", "current")


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise InvalidArgumentError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0) & (betas < 1)):
            raise InvalidArgumentError("betas must lie in (0, 1)")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def base_len(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative retention at 1-based step ``t``; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.base_len:
            raise IndexError(f"timestep {t} outside 0..{self.base_len}")
        return float(self.alpha_bars[t - 1])


def build_schedule(base_len: int = 1000, kind: str = "linear") -> NoiseSchedule:
    if base_len < 2:
        raise InvalidArgumentError(f"base_len must be >= 2, got {base_len}")
    if kind != "linear":
        raise InvalidArgumentError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(np.linspace(1e-4, 0.02, base_len))


@dataclass(frozen=True)
class TimestepPlan:
    taus: tuple

    @property
    def T(self) -> int:
        return len(self.taus)


def select_timesteps(schedule: NoiseSchedule, T: int) -> TimestepPlan:
    """Pick ``T`` uniformly spaced 1-based timesteps ending at ``base_len``."""
    n = schedule.base_len
    if not 1 <= T <= n:
        raise InvalidArgumentError(f"T must be in 1..{n}, got {T}")
    taus = [int(np.floor(n * i / T + 0.5)) for i in range(1, T + 1)]
    taus[-1] = n
    for i in range(T - 2, -1, -1):
        if taus[i] >= taus[i + 1]:
            taus[i] = taus[i + 1] - 1
    if taus[0] < 1:
        raise InvalidArgumentError("could not build a strictly increasing subsequence")
    return TimestepPlan(tuple(taus))


def posterior_sigma(schedule: NoiseSchedule, t: int) -> float:
    """Standard deviation of q(x_{t-1} | x_t, x_0) at 1-based step ``t``."""
    if t < 1:
        raise IndexError("posterior_sigma needs t >= 1")
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t - 1)
    beta_t = float(schedule.betas[t - 1])
    return float(np.sqrt(max((1.0 - abar_prev) / (1.0 - abar_t) * beta_t, 0.0)))


def noise_coefficients(abar: float, eta: float) -> tuple[float, float]:
    """Return ``(c1, c2)``: weights of the fresh noise and the predicted noise."""
    if not 0.0 <= eta < 1.0:
        raise InvalidArgumentError(f"eta must be in [0, 1), got {eta}")
    scale = np.sqrt(1.0 - abar)
    return float(scale * eta), float(scale * np.sqrt(1.0 - eta * eta))


@dataclass(frozen=True)
class CoefficientSet:
    """Scalar step coefficients over a timestep plan.

    ``c0_operator[s]`` multiplies the null-space projector inside the
    predicted-noise coefficient; ``c0_scalar[s]`` is its identity part.
    ``ratios[j, s] = sqrt(abar_j) / sqrt(abar_s)``.
    """

    abar: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    c0_scalar: np.ndarray
    c0_operator: np.ndarray
    ratios: np.ndarray
    eta: float
    variant: str
    noise_ref: str

    @property
    def T(self) -> int:
        return self.abar.size - 1


def plan_alpha_bars(schedule: NoiseSchedule, plan: TimestepPlan) -> np.ndarray:
    return np.array([1.0] + [schedule.alpha_bar(t) for t in plan.taus])


def prop1_coefficients(schedule: NoiseSchedule, plan: TimestepPlan, eta: float,
                       variant: str = "alpha", noise_ref: str = "previous") -> CoefficientSet:
    """Coefficients for the sequential step and the parallel closed form.

    ``variant`` selects the denominator of the projector term: ``"alpha"``
    uses the per-step retention ``abar_s / abar_{s-1}`` over the plan,
    ``"alpha_bar"`` the cumulative ``abar_s``. ``noise_ref`` selects whether
    the noise weights ``c1, c2`` are built from ``abar_{s-1}`` (``"previous"``)
    or ``abar_s`` (``"current"``).
    """
    if not 0.0 <= eta < 1.0:
        raise InvalidArgumentError(f"eta must be in [0, 1), got {eta}")
    if variant not in COEFFICIENT_VARIANTS:
        raise InvalidArgumentError(f"unknown coefficient variant {variant!r}")
    if noise_ref not in NOISE_REFS:
        raise InvalidArgumentError(f"unknown noise_ref {noise_ref!r}")
    abar = plan_alpha_bars(schedule, plan)
    T = plan.T
    c1 = np.zeros(T + 1)
    c2 = np.zeros(T + 1)
    c0_op = np.zeros(T + 1)
    for s in range(1, T + 1):
        ref = abar[s - 1] if noise_ref == "previous" else abar[s]
        c1[s], c2[s] = noise_coefficients(ref, eta)
        denom = abar[s] / abar[s - 1] if variant == "alpha" else abar[s]
        c0_op[s] = -np.sqrt((1.0 - abar[s]) / denom)
    root = np.sqrt(abar)
    ratios = root[:, None] / root[None, :]
    for arr in (abar, c1, c2, c0_op, ratios):
        arr.setflags(write=False)
    return CoefficientSet(abar=abar, c1=c1, c2=c2, c0_scalar=c2, c0_operator=c0_op,
                          ratios=ratios, eta=float(eta), variant=variant, noise_ref=noise_ref)
