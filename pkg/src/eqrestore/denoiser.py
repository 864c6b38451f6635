"""Noise predictors ``eps(x, abar)`` with vector-Jacobian products.

Time is passed as the cumulative retention ``abar`` rather than an integer
step, so denoisers never see schedule internals.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError, ModelFormatError, NumericDomainError, FormatError


def _check_inputs(x, abar):
    if not 0.0 < abar < 1.0:
        raise InvalidArgumentError(f"abar must be in (0, 1), got {abar}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("non-finite input to denoiser")
    return x


class Denoiser:
    """Interface: ``eps`` predicts the noise in ``x``, ``vjp`` is its transposed Jacobian."""

    kind = "abstract"

    def eps(self, x, abar):
        raise NotImplementedError

    def vjp(self, x, abar, cotangent):
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {"kind": self.kind}


class ZeroDenoiser(Denoiser):
    kind = "zero"

    def eps(self, x, abar):
        return np.zeros_like(_check_inputs(x, abar))

    def vjp(self, x, abar, cotangent):
        _check_inputs(x, abar)
        return np.zeros_like(np.asarray(cotangent, dtype=np.float64))


def finite_difference_vjp(denoiser, x, abar, cotangent, step=1e-5):
    """``J^T v`` by central differences along every input coordinate."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(cotangent, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = step
        hi = denoiser.eps((flat + e).reshape(x.shape), abar)
        lo = denoiser.eps((flat - e).reshape(x.shape), abar)
        out[i] = np.vdot(v, hi - lo) / (2 * step)
    return out.reshape(x.shape)


# --------------------------------------------------------------------------- GMM

@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    shape: tuple | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if mu.shape != var.shape or mu.shape[0] != w.size:
            raise InvalidArgumentError(f"GMM shapes disagree: weights {w.shape}, means {mu.shape}, "
                                       f"variances {var.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("GMM weights must lie on the simplex")
        if np.any(var <= 0):
            raise InvalidArgumentError("GMM variances must be strictly positive")
        if self.shape is not None and int(np.prod(self.shape)) != mu.shape[1]:
            raise InvalidArgumentError(f"GMM shape {self.shape} does not match dimension {mu.shape[1]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def sample(self, rng, count=1):
        """Draw ``count`` clean samples, shaped ``(count,) + shape``."""
        ks = rng.choice(self.n_components, size=count, p=self.weights)
        z = rng.standard_normal((count, self.dim))
        x = self.means[ks] + np.sqrt(self.variances[ks]) * z
        return x.reshape((count,) + (self.shape or (self.dim,)))


class GmmDenoiser(Denoiser):
    """Exact noise predictor for data drawn from a diagonal Gaussian mixture."""

    kind = "gmm"

    def __init__(self, params: GmmParams):
        self.params = params

    def _posterior(self, x, abar):
        p = self.params
        flat = x.reshape(-1)
        if flat.size != p.dim:
            raise InvalidArgumentError(f"input dimension {flat.size} != GMM dimension {p.dim}")
        ra = np.sqrt(abar)
        s = abar * p.variances + (1.0 - abar)           # (K, D) marginal variance of x | k
        d = flat[None, :] - ra * p.means                # (K, D)
        logp = (np.log(p.weights) - 0.5 * np.sum(np.log(2 * np.pi * s) + d * d / s, axis=1))
        r = np.exp(logp - logsumexp(logp))
        gain = ra * p.variances / s
        cond_means = p.means + gain * d                 # E[x0 | x, k]
        return flat, r, s, d, gain, cond_means

    def responsibilities(self, x, abar):
        x = _check_inputs(x, abar)
        return self._posterior(x, abar)[1]

    def posterior_mean(self, x, abar):
        x = _check_inputs(x, abar)
        _, r, _, _, _, cm = self._posterior(x, abar)
        return (r @ cm).reshape(x.shape)

    def eps(self, x, abar):
        x = _check_inputs(x, abar)
        flat, r, _, _, _, cm = self._posterior(x, abar)
        m = r @ cm
        return ((flat - np.sqrt(abar) * m) / np.sqrt(1.0 - abar)).reshape(x.shape)

    def vjp(self, x, abar, cotangent):
        x = _check_inputs(x, abar)
        u = np.asarray(cotangent, dtype=np.float64).reshape(-1)
        flat, r, s, d, gain, cm = self._posterior(x, abar)
        # grad of log-likelihood of component k wrt x
        score = -d / s
        mean_score = r @ score
        # J_m^T u = sum_k r_k gain_k * u + sum_k r_k (cm_k . u) (score_k - mean_score)
        proj = cm @ u
        jm_t_u = (r @ gain) * u + (r * proj) @ (score - mean_score[None, :])
        out = (u - np.sqrt(abar) * jm_t_u) / np.sqrt(1.0 - abar)
        return out.reshape(x.shape)

    def descriptor(self):
        return {"kind": self.kind, "components": self.params.n_components, "dim": self.params.dim}


def random_gmm(shape, n_components=3, seed=0, variance=0.05, smooth=True):
    """Toy image prior: smooth random component means in ``[-0.8, 0.8]``."""
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    dim = int(np.prod(shape))
    means = []
    for _ in range(n_components):
        if smooth and len(shape) == 3:
            c, h, w = shape
            yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
            img = np.empty(shape)
            for ch in range(c):
                a, b, ph = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
                img[ch] = 0.8 * np.sin(2 * np.pi * (a * xx + b * yy) + ph)
            means.append(img.reshape(-1))
        else:
            means.append(rng.uniform(-0.8, 0.8, dim))
    weights = rng.dirichlet(np.full(n_components, 4.0))
    weights = weights / weights.sum()
    variances = variance * rng.uniform(0.5, 1.5, (n_components, dim))
    return GmmParams(weights, np.array(means), variances, shape=shape)


# --------------------------------------------------------------------------- MLP

ACTIVATIONS = ("tanh", "identity")


def time_embedding(abar, dim):
    """Sinusoidal features of ``1000 * (1 - abar)``; ``dim`` must be even."""
    if dim == 0:
        return np.zeros(0)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angle = 1000.0 * (1.0 - abar) * freqs
    return np.concatenate([np.sin(angle), np.cos(angle)])


@dataclass
class MlpModel:
    """Dense network over ``concat(flatten(x), time_embedding(abar))``."""

    weights: list
    biases: list
    activations: list
    embed_dim: int

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ModelFormatError("layer lists must be non-empty and equally long")
        if self.embed_dim % 2:
            raise ModelFormatError("embed_dim must be even")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ModelFormatError(f"layer {i}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ModelFormatError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ModelFormatError(f"layer {i}: input dim {w.shape[1]} does not chain")
        if self.weights[-1].shape[0] + self.embed_dim != self.weights[0].shape[1]:
            raise ModelFormatError("output dim must equal data dim (first-layer input minus embed_dim)")

    @property
    def data_dim(self):
        return self.weights[-1].shape[0]

    def forward(self, flat, abar, keep=False):
        h = np.concatenate([flat, time_embedding(abar, self.embed_dim)])
        cache = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = w @ h + b
            out = np.tanh(a) if act == "tanh" else a
            cache.append(out)
            h = out
        return (h, cache) if keep else h


class MlpDenoiser(Denoiser):
    kind = "mlp"

    def __init__(self, model: MlpModel, source=None):
        self.model = model
        self.source = source

    def _flat(self, x):
        flat = x.reshape(-1)
        if flat.size != self.model.data_dim:
            raise InvalidArgumentError(f"input dimension {flat.size} != model dimension {self.model.data_dim}")
        return flat

    def eps(self, x, abar):
        x = _check_inputs(x, abar)
        return self.model.forward(self._flat(x), abar).reshape(x.shape)

    def vjp(self, x, abar, cotangent):
        x = _check_inputs(x, abar)
        _, cache = self.model.forward(self._flat(x), abar, keep=True)
        g = np.asarray(cotangent, dtype=np.float64).reshape(-1)
        m = self.model
        for i in range(len(m.weights) - 1, -1, -1):
            if m.activations[i] == "tanh":
                g = g * (1.0 - cache[i] ** 2)
            g = m.weights[i].T @ g
        return g[:m.data_dim].reshape(x.shape)

    def descriptor(self):
        return {"kind": self.kind, "path": None if self.source is None else str(self.source),
                "layers": [list(w.shape) for w in self.model.weights], "embed_dim": self.model.embed_dim}


def load_mlp(path) -> MlpModel:
    """Load ``manifest.json`` + ``weights.dqt`` from a model directory."""
    from .io import read_dqt1_all

    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        layers = manifest["layers"]
        embed_dim = int(manifest["embed_dim"])
        order = manifest.get("tensor_order") or [name for i in range(len(layers))
                                                 for name in (f"layers.{i}.weight", f"layers.{i}.bias")]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"unreadable MLP manifest: {exc}") from exc
    try:
        tensors = read_dqt1_all(path / "weights.dqt")
    except OSError as exc:
        raise ModelFormatError(f"unreadable weight blob: {exc}") from exc
    except FormatError as exc:
        raise ModelFormatError(f"bad weight blob: {exc}") from exc
    if len(tensors) != len(order):
        raise ModelFormatError(f"manifest declares {len(order)} tensors, blob holds {len(tensors)}")
    named = dict(zip(order, tensors))
    weights, biases, acts = [], [], []
    for i, layer in enumerate(layers):
        try:
            w, b = named[f"layers.{i}.weight"], named[f"layers.{i}.bias"]
        except KeyError as exc:
            raise ModelFormatError(f"missing tensor {exc}") from exc
        if w.shape != (layer["out"], layer["in"]) or b.shape != (layer["out"],):
            raise ModelFormatError(f"layer {i}: declared {layer['in']}->{layer['out']}, "
                                   f"blob has weight {w.shape}, bias {b.shape}")
        weights.append(w)
        biases.append(b)
        acts.append(layer.get("activation", "identity"))
    return MlpModel(weights, biases, acts, embed_dim)


def save_mlp(path, model: MlpModel) -> None:
    from .io import write_dqt1_all

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    order, tensors = [], []
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        order += [f"layers.{i}.weight", f"layers.{i}.bias"]
        tensors += [w, b]
    manifest = {
        "layers": [{"in": w.shape[1], "out": w.shape[0], "activation": a}
                   for w, a in zip(model.weights, model.activations)],
        "embed_dim": model.embed_dim,
        "tensor_order": order,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    write_dqt1_all(path / "weights.dqt", tensors)


# --------------------------------------------------------------------------- plumbing

class CountingDenoiser(Denoiser):
    """Wraps a denoiser and counts ``eps`` and ``vjp`` calls (thread-safe)."""

    def __init__(self, inner: Denoiser):
        self.inner = inner
        self.kind = inner.kind
        self.eps_calls = 0
        self.vjp_calls = 0
        self._lock = threading.Lock()

    def eps(self, x, abar):
        with self._lock:
            self.eps_calls += 1
        return self.inner.eps(x, abar)

    def vjp(self, x, abar, cotangent):
        with self._lock:
            self.vjp_calls += 1
        return self.inner.vjp(x, abar, cotangent)

    def descriptor(self):
        return self.inner.descriptor()


def load_denoiser(path) -> Denoiser:
    """``zero`` | a GMM JSON spec file | an MLP model directory."""
    from .io import read_gmm_spec

    if str(path) == "zero":
        return ZeroDenoiser()
    path = Path(path)
    if path.is_dir():
        return MlpDenoiser(load_mlp(path), source=path)
    if not path.exists():
        raise FormatError(f"denoiser path {str(path)!r} does not exist")
    return GmmDenoiser(read_gmm_spec(path))
