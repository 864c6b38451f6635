"""Linear degradation operators with adjoints and pseudo-inverses.

Images are ``(C, H, W)`` float64 arrays. Every operator exposes ``apply``
(A), ``adjoint`` (A^T) and ``pinv`` (A^+); the null-space projector
``I - A^+ A`` is derived from them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (CompositeNotPseudoInvertibleError, DegenerateOperatorError,
                     InvalidArgumentError)

MP_PROBE_TOL = 1e-8


def _check_shape(x, shape, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(shape):
        raise InvalidArgumentError(f"{what}: expected shape {tuple(shape)}, got {x.shape}")
    return x


class LinearDegradation:
    """Base class. Subclasses implement ``_apply``, ``_adjoint`` and ``_pinv``."""

    name = "linear"

    def __init__(self, in_shape, out_shape):
        self.in_shape = tuple(int(d) for d in in_shape)
        self.out_shape = tuple(int(d) for d in out_shape)

    def apply(self, x):
        return self._apply(_check_shape(x, self.in_shape, f"{self.name}.apply"))

    def adjoint(self, u):
        return self._adjoint(_check_shape(u, self.out_shape, f"{self.name}.adjoint"))

    def pinv(self, u):
        return self._pinv(_check_shape(u, self.out_shape, f"{self.name}.pinv"))

    def project_range(self, x):
        """A^+ A x."""
        return self.pinv(self.apply(x))

    def project_null(self, x):
        """(I - A^+ A) x."""
        return np.asarray(x, dtype=np.float64) - self.project_range(x)

    def observation_to_image(self, y):
        """Render an observation as an image-shaped array (for file output)."""
        return _check_shape(y, self.out_shape, f"{self.name}.observation_to_image")

    def observation_from_image(self, img):
        return _check_shape(img, self.out_shape, f"{self.name}.observation_from_image")

    @property
    def observation_image_shape(self):
        return self.out_shape

    def descriptor(self) -> dict:
        return {"kind": self.name, "in_shape": list(self.in_shape), "out_shape": list(self.out_shape)}

    def __repr__(self):
        return f"{type(self).__name__}(in_shape={self.in_shape}, out_shape={self.out_shape})"


class IdentityOperator(LinearDegradation):
    name = "identity"

    def __init__(self, shape):
        super().__init__(shape, shape)

    def _apply(self, x):
        return x.copy()

    _adjoint = _apply
    _pinv = _apply


class MaskOperator(LinearDegradation):
    """Selects observed pixels; ``y`` is the flat vector of kept entries.

    A 2-D ``(H, W)`` mask is replicated over channels; a 3-D mask is used as is.
    """

    name = "mask"

    def __init__(self, mask, channels=None):
        mask = np.asarray(mask)
        if not np.all((mask == 0) | (mask == 1)):
            raise InvalidArgumentError("mask entries must be 0 or 1")
        if mask.ndim == 2:
            mask = np.broadcast_to(mask, (channels or 1,) + mask.shape)
        elif mask.ndim != 3:
            raise InvalidArgumentError(f"mask must be 2-D or 3-D, got ndim={mask.ndim}")
        self.mask = np.ascontiguousarray(mask, dtype=bool)
        self.index = np.flatnonzero(self.mask)
        if self.index.size == 0:
            raise DegenerateOperatorError("mask observes no pixels")
        super().__init__(self.mask.shape, (self.index.size,))

    def _apply(self, x):
        return x.reshape(-1)[self.index]

    def _adjoint(self, u):
        out = np.zeros(int(np.prod(self.in_shape)))
        out[self.index] = u
        return out.reshape(self.in_shape)

    _pinv = _adjoint

    def observation_to_image(self, y):
        return self._adjoint(_check_shape(y, self.out_shape, "mask.observation_to_image"))

    def observation_from_image(self, img):
        return self._apply(_check_shape(img, self.in_shape, "mask.observation_from_image"))

    @property
    def observation_image_shape(self):
        return self.in_shape

    def descriptor(self):
        d = super().descriptor()
        d["observed"] = int(self.index.size)
        return d


class GrayscaleOperator(LinearDegradation):
    """Per-pixel channel mean of an RGB image."""

    name = "grayscale"

    def __init__(self, shape):
        if len(shape) != 3 or shape[0] != 3:
            raise InvalidArgumentError(f"grayscale needs a 3-channel (3, H, W) shape, got {tuple(shape)}")
        super().__init__(shape, (1,) + tuple(shape[1:]))

    def _apply(self, x):
        return x.mean(axis=0, keepdims=True)

    def _adjoint(self, u):
        return np.repeat(u / 3.0, 3, axis=0)

    def _pinv(self, u):
        return np.repeat(u, 3, axis=0)


class DownsampleOperator(LinearDegradation):
    """Block-average downsampling by an integer factor."""

    name = "downsample"

    def __init__(self, shape, factor):
        c, h, w = shape
        if factor < 1:
            raise InvalidArgumentError("factor must be a positive integer")
        if h % factor or w % factor:
            raise InvalidArgumentError(f"image {h}x{w} not divisible by factor {factor}")
        self.factor = int(factor)
        super().__init__(shape, (c, h // factor, w // factor))

    def _apply(self, x):
        c, h, w = self.out_shape
        f = self.factor
        return x.reshape(c, h, f, w, f).mean(axis=(2, 4))

    def _pinv(self, u):
        f = self.factor
        return np.repeat(np.repeat(u, f, axis=1), f, axis=2)

    def _adjoint(self, u):
        return self._pinv(u) / float(self.factor ** 2)

    def descriptor(self):
        d = super().descriptor()
        d.update(factor=self.factor, label=f"sr{self.factor} (block-average)")
        return d


@dataclass(frozen=True)
class BlurKernel:
    taps: np.ndarray
    kind: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise InvalidArgumentError("kernel must be 2-D with odd side lengths")
        if np.any(taps < 0):
            raise InvalidArgumentError("kernel taps must be non-negative")
        total = taps.sum()
        if total <= 0:
            raise InvalidArgumentError("kernel taps must have positive sum")
        object.__setattr__(self, "taps", taps / total)

    @classmethod
    def gaussian(cls, sigma, size=None):
        return cls.anisotropic(sigma, sigma, 0.0, size, kind="gaussian")

    @classmethod
    def anisotropic(cls, sigma_x, sigma_y, angle=0.0, size=None, kind="anisotropic"):
        if sigma_x <= 0 or sigma_y <= 0:
            raise InvalidArgumentError("kernel sigmas must be positive")
        if size is None:
            size = 2 * int(np.ceil(3 * max(sigma_x, sigma_y))) + 1
        r = size // 2
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
        c, s = np.cos(angle), np.sin(angle)
        u = c * xx + s * yy
        v = -s * xx + c * yy
        taps = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
        return cls(taps, kind, (float(sigma_x), float(sigma_y), float(angle), int(size)))

    @classmethod
    def identity(cls):
        return cls(np.ones((1, 1)), "identity")


class BlurOperator(LinearDegradation):
    """Circular convolution, diagonal in the 2-D DFT basis.

    Frequencies with gain magnitude at or below ``svd_threshold`` are treated
    as null space by both ``apply`` and ``pinv``, so the Moore-Penrose
    identities hold to rounding error.
    """

    name = "blur"

    def __init__(self, shape, kernel: BlurKernel, svd_threshold=1e-6):
        c, h, w = shape
        kh, kw = kernel.taps.shape
        if kh > h or kw > w:
            raise InvalidArgumentError(f"kernel {kh}x{kw} larger than image {h}x{w}")
        self.kernel = kernel
        self.svd_threshold = float(svd_threshold)
        padded = np.zeros((h, w))
        padded[:kh, :kw] = kernel.taps
        padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        gains = np.fft.fft2(padded)
        keep = np.abs(gains) > self.svd_threshold
        self.gains = np.where(keep, gains, 0.0)
        self.inverse_gains = np.where(keep, 1.0 / np.where(keep, gains, 1.0), 0.0)
        self.retained = int(keep.sum())
        super().__init__(shape, shape)

    def _filter(self, x, gains):
        return np.fft.ifft2(np.fft.fft2(x, axes=(1, 2)) * gains, axes=(1, 2)).real

    def _apply(self, x):
        return self._filter(x, self.gains)

    def _adjoint(self, u):
        return self._filter(u, np.conj(self.gains))

    def _pinv(self, u):
        return self._filter(u, self.inverse_gains)

    def descriptor(self):
        d = super().descriptor()
        d.update(kernel=self.kernel.kind, kernel_params=list(self.kernel.params),
                 kernel_size=list(self.kernel.taps.shape), svd_threshold=self.svd_threshold)
        return d


class CompositeOperator(LinearDegradation):
    """``outer o inner`` with the hand-built pseudo-inverse ``inner^+ o outer^+``.

    The candidate is checked against the Moore-Penrose identities at
    construction because it is only exact under range conditions.
    """

    name = "composite"

    def __init__(self, outer: LinearDegradation, inner: LinearDegradation, probes=32, seed=0):
        if tuple(outer.in_shape) != tuple(inner.out_shape):
            raise InvalidArgumentError(f"composite shapes incompatible: outer expects {outer.in_shape}, "
                                       f"inner produces {inner.out_shape}")
        self.outer = outer
        self.inner = inner
        super().__init__(inner.in_shape, outer.out_shape)
        res = moore_penrose_residuals(self, probes=probes, seed=seed)
        worst = max(res["AA+A"], res["A+AA+"])
        if worst > MP_PROBE_TOL:
            raise CompositeNotPseudoInvertibleError(worst)

    def _apply(self, x):
        return self.outer.apply(self.inner.apply(x))

    def _adjoint(self, u):
        return self.inner.adjoint(self.outer.adjoint(u))

    def _pinv(self, u):
        return self.inner.pinv(self.outer.pinv(u))

    def observation_to_image(self, y):
        return self.outer.observation_to_image(y)

    def observation_from_image(self, img):
        return self.outer.observation_from_image(img)

    @property
    def observation_image_shape(self):
        return self.outer.observation_image_shape

    def descriptor(self):
        d = super().descriptor()
        d.update(outer=self.outer.descriptor(), inner=self.inner.descriptor())
        return d


def make_mask_operator(mask, channels=None):
    return MaskOperator(mask, channels)


def make_grayscale_operator(shape):
    return GrayscaleOperator(shape)


def make_downsample_operator(shape, factor):
    return DownsampleOperator(shape, factor)


def make_blur_operator(shape, kernel, svd_threshold=1e-6):
    return BlurOperator(shape, kernel, svd_threshold)


def make_composite_operator(outer, inner):
    return CompositeOperator(outer, inner)


def moore_penrose_residuals(op: LinearDegradation, probes=32, seed=0) -> dict:
    """Worst-case residuals of the Penrose identities over random probes.

    Keys: ``AA+A``, ``A+AA+``, ``adjoint`` (inner-product mismatch),
    ``idempotence`` of ``I - A^+A``, ``sym_A+A`` and ``sym_AA+``
    (``<Px, v> - <x, Pv>`` for both projectors).
    """
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(("AA+A", "A+AA+", "adjoint", "idempotence", "sym_A+A", "sym_AA+"), 0.0)

    def bump(key, value):
        worst[key] = max(worst[key], float(value))

    for _ in range(probes):
        x = rng.standard_normal(op.in_shape)
        x2 = rng.standard_normal(op.in_shape)
        u = rng.standard_normal(op.out_shape)
        u2 = rng.standard_normal(op.out_shape)
        ax = op.apply(x)
        bump("AA+A", np.max(np.abs(op.apply(op.pinv(ax)) - ax)))
        pu = op.pinv(u)
        bump("A+AA+", np.max(np.abs(op.pinv(op.apply(pu)) - pu)))
        bump("adjoint", abs(np.vdot(ax, u) - np.vdot(x, op.adjoint(u))))
        px = op.project_null(x)
        bump("idempotence", np.max(np.abs(op.project_null(px) - px)))
        bump("sym_A+A", abs(np.vdot(op.project_range(x), x2) - np.vdot(x, op.project_range(x2))))
        bump("sym_AA+", abs(np.vdot(op.apply(op.pinv(u)), u2) - np.vdot(u, op.apply(op.pinv(u2)))))
    return worst


def build_task_operator(task, shape, mask=None, svd_threshold=1e-6):
    """Operator for a named restoration task.

    Tasks: ``sr2``, ``sr4``, ``deblur-gauss``, ``deblur-aniso``, ``color``,
    ``inpaint`` and ``composite`` (mask after grayscale). The last two need
    ``mask`` as an ``(H, W)`` binary array.
    """
    shape = tuple(shape)
    if task in ("sr2", "sr4"):
        return DownsampleOperator(shape, int(task[2:]))
    if task == "deblur-gauss":
        return BlurOperator(shape, BlurKernel.gaussian(1.0, 3), svd_threshold)
    if task == "deblur-aniso":
        return BlurOperator(shape, BlurKernel.anisotropic(1.5, 0.5, np.pi / 4, 5), svd_threshold)
    if task == "color":
        return GrayscaleOperator(shape)
    if task in ("inpaint", "composite"):
        if mask is None:
            raise InvalidArgumentError(f"task {task!r} requires a mask")
        mask = np.asarray(mask)
        if mask.ndim == 3:
            mask = mask[0]
        if task == "inpaint":
            return MaskOperator(mask, channels=shape[0])
        return CompositeOperator(MaskOperator(mask, channels=1), GrayscaleOperator(shape))
    raise InvalidArgumentError(f"unknown task {task!r}")


def stripe_mask(h, w, period=4, width=1):
    """Horizontal stripe mask: rows ``i % period < width`` are missing."""
    mask = np.ones((h, w), dtype=np.uint8)
    for i in range(h):
        if i % period < width:
            mask[i] = 0
    return mask


TASKS = ("sr2", "sr4", "deblur-gauss", "deblur-aniso", "color", "inpaint", "composite")


class MatrixOperator(LinearDegradation):
    """Dense operator on a flat vector; the pseudo-inverse comes from an SVD."""

    name = "matrix"

    def __init__(self, matrix, in_shape=None, rcond=1e-10):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise InvalidArgumentError("matrix operator needs a 2-D array")
        self.matrix = matrix
        self.pinv_matrix = np.linalg.pinv(matrix, rcond=rcond)
        in_shape = tuple(in_shape) if in_shape is not None else (matrix.shape[1],)
        if int(np.prod(in_shape)) != matrix.shape[1]:
            raise InvalidArgumentError(f"in_shape {in_shape} does not match {matrix.shape[1]} columns")
        super().__init__(in_shape, (matrix.shape[0],))

    def _apply(self, x):
        return self.matrix @ x.reshape(-1)

    def _adjoint(self, u):
        return (self.matrix.T @ u).reshape(self.in_shape)

    def _pinv(self, u):
        return (self.pinv_matrix @ u).reshape(self.in_shape)


def random_matrix_operator(dim, rank=None, rows=None, seed=0, in_shape=None):
    """Random rank-deficient operator ``U diag(s) V^T`` with a well-separated spectrum."""
    rng = np.random.default_rng(seed)
    rows = rows or dim
    rank = rank or max(1, min(rows, dim) // 2)
    u, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    v, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    s = rng.uniform(0.5, 2.0, rank)
    matrix = (u[:, :rank] * s) @ v[:, :rank].T
    return MatrixOperator(matrix, in_shape=in_shape)
