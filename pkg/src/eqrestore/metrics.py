"""PSNR, SSIM and data-consistency metrics.

PSNR and SSIM take images in ``[0, 1]``; use ``to_unit_range`` on internal
``[-1, 1]`` tensors (clamping happens only here, never in the sampler).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError


def to_unit_range(x):
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; ``math.inf`` for identical inputs."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, window):
    views = sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", views, window)


def ssim(a, b, window="gaussian", K1=0.01, K2=0.03, L=1.0) -> float:
    """Mean local SSIM over fully-contained windows, averaged over channels.

    ``window`` is ``"gaussian"`` (11x11, sigma 1.5) or ``"mean8"`` (8x8 box).
    """
    a, b = _same_shape(a, b)
    if window == "gaussian":
        w = gaussian_window()
    elif window == "mean8":
        w = np.full((8, 8), 1.0 / 64)
    else:
        raise InvalidArgumentError(f"unknown SSIM window {window!r}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise InvalidArgumentError("ssim expects (H, W) or (C, H, W) images")
    if min(a.shape[1:]) < w.shape[0]:
        raise InvalidArgumentError(f"image {a.shape[1:]} smaller than {w.shape[0]}x{w.shape[1]} window")
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    scores = []
    for ca, cb in zip(a, b):
        mu_a, mu_b = _filter_valid(ca, w), _filter_valid(cb, w)
        var_a = _filter_valid(ca * ca, w) - mu_a * mu_a
        var_b = _filter_valid(cb * cb, w) - mu_b * mu_b
        cov = _filter_valid(ca * cb, w) - mu_a * mu_b
        num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
        den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def consistency(x, obs) -> float:
    """Squared residual ``||A x - y||^2``."""
    r = obs.operator.apply(x) - obs.y
    return float(np.vdot(r, r))


@dataclass
class MetricReport:
    psnr: float | None
    ssim: float | None
    consistency: float
    runtime_ms: float
    nfe_count: int

    def to_dict(self):
        d = asdict(self)
        if d["psnr"] is not None and math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d


def evaluate(x, obs, reference=None, runtime_ms=0.0, nfe_count=0, window="gaussian") -> MetricReport:
    """Metrics of a restoration ``x`` (internal range); PSNR/SSIM need ``reference``."""
    p = s = None
    if reference is not None:
        ua, ub = to_unit_range(x), to_unit_range(reference)
        p = psnr(ua, ub)
        try:
            s = ssim(ua, ub, window=window)
        except InvalidArgumentError:
            s = None
    return MetricReport(p, s, consistency(x, obs), float(runtime_ms), int(nfe_count))
