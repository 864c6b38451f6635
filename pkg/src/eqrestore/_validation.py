import numbers

import numpy as np

from .errors import InvalidArgumentError, NumericDomainError


def check_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise InvalidArgumentError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise InvalidArgumentError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_interval(value, name, low, high, closed_low=True, closed_high=False):
    if not isinstance(value, numbers.Real):
        raise InvalidArgumentError(f"{name} must be a real number, got {value!r}")
    ok_low = value >= low if closed_low else value > low
    ok_high = value <= high if closed_high else value < high
    if not (ok_low and ok_high):
        lb = "[" if closed_low else "("
        rb = "]" if closed_high else ")"
        raise InvalidArgumentError(f"{name} must be in {lb}{low}, {high}{rb}, got {value}")
    return float(value)


def check_tensor(x, shape=None, name="input"):
    """Float64 copy-free view of ``x``; finite, optionally of a fixed shape."""
    x = np.asarray(x, dtype=np.float64)
    if shape is not None and x.shape != tuple(shape):
        raise InvalidArgumentError(f"{name}: expected shape {tuple(shape)}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{name} contains non-finite values")
    return x


def check_batch(X, item_shape, name="X"):
    """Accept one item or a batch of items; always return a batch."""
    X = np.asarray(X, dtype=np.float64)
    item_shape = tuple(item_shape)
    if X.shape == item_shape:
        X = X[None]
    if X.shape[1:] != item_shape:
        raise InvalidArgumentError(f"{name}: expected items of shape {item_shape}, got array {X.shape}")
    return check_tensor(X, name=name)
