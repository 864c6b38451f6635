"""Fixed-point solvers over the stacked chain: Picard and Anderson acceleration.

Every iterate's map value is computed once and cached, so a solve that stops
after ``k`` iterations costs ``(k + 1)`` map evaluations.
"""
from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericDivergenceError
from .sampler import SamplerContext, SamplingState, apply_F, make_state


@dataclass(frozen=True)
class SolverConfig:
    K: int = 15
    m: int = 5
    tol: float = 1e-6
    ridge: float = 1e-8
    mixing: float = 1.0
    method: str = "anderson"

    def __post_init__(self):
        if self.K < 1:
            raise InvalidArgumentError("K must be >= 1")
        if self.m < 1:
            raise InvalidArgumentError("m must be >= 1")
        if not self.tol > 0:
            raise InvalidArgumentError("tol must be > 0")
        if self.ridge < 0:
            raise InvalidArgumentError("ridge must be >= 0")
        if not 0 < self.mixing <= 1:
            raise InvalidArgumentError("mixing must be in (0, 1]")
        if self.method not in ("anderson", "picard"):
            raise InvalidArgumentError(f"unknown solver {self.method!r}")


@dataclass
class SolveResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    map_evals: int = 0
    naive_map_evals: int = 0


def anderson_weights(residuals, ridge):
    """Weights ``alpha`` (summing to 1) minimising ``||G alpha||`` over the given residuals.

    Solved as an unconstrained ridge problem on residual differences. Returns
    ``None`` when the normal equations are singular.
    """
    n = len(residuals)
    if n == 1:
        return np.ones(1)
    G = np.stack([r.reshape(-1) for r in residuals], axis=1)
    dG = np.diff(G, axis=1)                       # columns g_{i+1} - g_i
    H = dG.T @ dG
    scale = np.trace(H) / H.shape[0]
    if not np.isfinite(scale) or scale <= 0:
        return None
    try:
        gamma = np.linalg.solve(H + ridge * scale * np.eye(H.shape[0]), dG.T @ G[:, -1])
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(gamma)):
        return None
    alpha = np.empty(n)
    alpha[0] = gamma[0]
    alpha[1:-1] = gamma[1:] - gamma[:-1]
    alpha[-1] = 1.0 - gamma[-1]
    return alpha


def fixed_point_iterate(F, x_init, config: SolverConfig, depth=None, row_axis=False):
    """Run Picard (``depth=1``) or Anderson on ``x = F(x)`` for any array ``x``.

    ``row_axis`` records per-row sup-norm residuals over axis 0.
    """
    depth = config.m if depth is None else depth
    t0 = time.perf_counter()
    history = []
    xs, fs, gs = deque(maxlen=depth), deque(maxlen=depth), deque(maxlen=depth)
    x = np.asarray(x_init, dtype=np.float64)
    evals = 0
    naive = 0
    best_res = np.inf

    for k in range(config.K + 1):
        fx = F(x)
        evals += 1
        naive += 1 if k == 0 else len(xs) + 1
        g = fx - x
        if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(x))):
            raise NumericDivergenceError(k)
        res = float(np.max(np.abs(g))) if g.size else 0.0
        best_res = min(best_res, res)
        entry = {"iteration": k, "residual": res, "best_residual": best_res,
                 "wall_ms": 1e3 * (time.perf_counter() - t0), "map_evals": evals,
                 "naive_map_evals": naive, "alpha": [], "fallback": False}
        if row_axis and g.ndim > 1:
            entry["row_residuals"] = np.max(np.abs(g.reshape(g.shape[0], -1)), axis=1).tolist()
        history.append(entry)
        if res <= config.tol:
            return SolveResult(x, True, k, res, history, evals, naive)
        if k == config.K:
            break
        xs.append(x)
        fs.append(fx)
        gs.append(g)
        alpha = anderson_weights(list(gs), config.ridge)
        if alpha is None:
            entry["fallback"] = True
            alpha = np.ones(1)
            combo = [(xs[-1], fs[-1])]
        else:
            combo = list(zip(xs, fs))
        entry["alpha"] = alpha.tolist()
        beta = config.mixing
        if beta == 1.0:
            x = sum(a * fi for a, (_, fi) in zip(alpha, combo))
        else:
            x = sum(a * ((1.0 - beta) * xi + beta * fi) for a, (xi, fi) in zip(alpha, combo))
    return SolveResult(x, False, config.K, res, history, evals, naive)


def _stack_map(state: SamplingState, ctx: SamplerContext):
    return lambda X: apply_F(state.with_states(X), ctx)


def _finish(result, state, ctx):
    T = ctx.T
    result.map_evals *= 1
    out = state.with_states(result.x)
    for entry in result.history:
        entry["nfe"] = entry["map_evals"] * T
        entry["naive_nfe"] = entry["naive_map_evals"] * T
    return out, result


def picard_solve(state: SamplingState, ctx: SamplerContext, config: SolverConfig):
    """Iterate ``x <- F(x)``; returns ``(solved state, SolveResult)``."""
    res = fixed_point_iterate(_stack_map(state, ctx), state.states, config, depth=1, row_axis=True)
    return _finish(res, state, ctx)


def anderson_solve(state: SamplingState, ctx: SamplerContext, config: SolverConfig):
    res = fixed_point_iterate(_stack_map(state, ctx), state.states, config, depth=config.m, row_axis=True)
    return _finish(res, state, ctx)


@dataclass
class RootSolveResult:
    x0: np.ndarray
    state: SamplingState
    solve: SolveResult
    ctx: SamplerContext
    config: SolverConfig

    @property
    def history(self):
        return self.solve.history

    @property
    def nfe(self):
        return self.solve.map_evals * self.ctx.T

    @property
    def naive_nfe(self):
        return self.solve.naive_map_evals * self.ctx.T

    def summary(self) -> dict:
        return {"method": self.config.method, "converged": self.solve.converged,
                "iterations": self.solve.iterations, "final_residual": self.solve.residual,
                "nfe": self.nfe, "nfe_naive": self.naive_nfe,
                "fallbacks": sum(1 for h in self.history if h["fallback"])}


def solve_state(state: SamplingState, ctx: SamplerContext, config: SolverConfig):
    solve = anderson_solve if config.method == "anderson" else picard_solve
    return solve(state, ctx, config)


def root_solve(ctx: SamplerContext, config: SolverConfig = SolverConfig(), seed=0,
               init=None, x_T=None, state=None) -> RootSolveResult:
    """Solve the chain for its fixed point.

    Rows start as copies of ``x_T`` unless ``init`` warm-starts them. Pass a
    prepared ``state`` to reuse frozen noises (``init``/``x_T`` then replace
    its rows / injection).
    """
    if state is None:
        state = make_state(ctx.shape, ctx.T, seed, x_T=x_T, init=init)
    else:
        if x_T is not None:
            state = SamplingState(state.states, np.asarray(x_T, dtype=np.float64), state.noises, state.seed)
            if init is None:
                state = state.with_states(np.broadcast_to(state.x_T, state.states.shape).copy())
        if init is not None:
            init = np.asarray(init, dtype=np.float64)
            state = state.with_states(np.broadcast_to(init, state.states.shape).copy())
    solved, solve = solve_state(state, ctx, config)
    return RootSolveResult(solved.x0.copy(), solved, solve, ctx, config)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "residual", "alpha", "wall_ms", "nfe", "naive_nfe", "fallback", "row_residuals"])
        for h in history:
            w.writerow([h["iteration"], repr(h["residual"]), ";".join(repr(a) for a in h["alpha"]),
                        f"{h['wall_ms']:.3f}", h.get("nfe", h["map_evals"]),
                        h.get("naive_nfe", h["naive_map_evals"]), int(h["fallback"]),
                        ";".join(repr(r) for r in h.get("row_residuals", []))])
