"""Dense-grid foundation: validated float64 grids, the softmax head, and a
finite-difference gradient oracle.

Every tensor in this package is a plain C-contiguous float64 ndarray ("grid").
The thin dataclasses below tag the three shapes that cross module boundaries:
a single-channel image in [0,1], a [K,H,W] logit field, and the per-pixel
probability simplex produced by :func:`softmax`.

All operations are pure: inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, OracleFailureError

SIMPLEX_ATOL = 1e-9  # per-pixel probability sums must match 1 this closely


def as_grid(values, shape=None) -> np.ndarray:
    """Coerce `values` to a float64 array, checking finiteness and optional shape."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("grid contains NaN or Inf")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise InvalidInputError(f"grid shape {arr.shape} != expected {tuple(shape)}")
    return arr


@dataclass(frozen=True)
class Image:
    """Single-channel intensity grid with every value in [0, 1]."""

    intensities: np.ndarray  # (H, W) float64

    def __post_init__(self):
        arr = as_grid(self.intensities)
        if arr.ndim != 2:
            raise InvalidInputError(f"image must be 2-D, got shape {arr.shape}")
        if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise InvalidInputError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "intensities", arr)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]


@dataclass(frozen=True)
class LogitField:
    """Unconstrained pre-softmax scores, one [H, W] plane per class."""

    logits: np.ndarray  # (K, H, W) float64

    def __post_init__(self):
        arr = as_grid(self.logits)
        if arr.ndim != 3:
            raise InvalidInputError(f"logits must be [K, H, W], got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise InvalidInputError("logit field needs at least 2 classes")
        object.__setattr__(self, "logits", arr)

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class SoftPrediction:
    """Per-pixel probability simplex over K classes."""

    probabilities: np.ndarray  # (K, H, W) float64

    def __post_init__(self):
        arr = as_grid(self.probabilities)
        if arr.ndim != 3:
            raise InvalidInputError(f"probabilities must be [K, H, W], got shape {arr.shape}")
        if arr.min() < -SIMPLEX_ATOL or arr.max() > 1.0 + SIMPLEX_ATOL:
            raise InvalidInputError("probabilities must lie in [0, 1]")
        sums = arr.sum(axis=0)
        if np.abs(sums - 1.0).max() > SIMPLEX_ATOL:
            raise InvalidInputError("per-pixel probabilities must sum to 1")
        object.__setattr__(self, "probabilities", arr)

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.probabilities.shape[1], self.probabilities.shape[2]


def softmax(field: LogitField) -> SoftPrediction:
    """Class-wise softmax over the leading axis, stabilized per pixel.

    The per-pixel maximum logit is subtracted before exponentiation, so the
    result is exact up to rounding for logit magnitudes far beyond float64's
    naive exp range.
    """
    logits = field.logits
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=0, keepdims=True)
    return SoftPrediction(probs)


def softmax_backward(field: LogitField, grad_wrt_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax probabilities back to the logits.

    Applies the per-pixel softmax Jacobian: with p the probability column at a
    pixel and g the incoming gradient, d/dlogits = p * (g - <g, p>).
    """
    g = as_grid(grad_wrt_probs)
    if g.shape != field.logits.shape:
        raise InvalidInputError(
            f"gradient shape {g.shape} != logits shape {field.logits.shape}"
        )
    p = softmax(field).probabilities
    inner = (g * p).sum(axis=0, keepdims=True)
    return p * (g - inner)


def finite_diff_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function of a grid.

    Perturbs one coordinate at a time: (f(x + h e_i) - f(x - h e_i)) / 2h.
    This is the reference oracle every analytic backward pass in the package
    is checked against; it deliberately knows nothing about the function.
    """
    if step <= 0:
        raise InvalidInputError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        probe = x.copy().reshape(-1)
        probe[i] += step
        hi = float(f(probe.reshape(x.shape)))
        probe[i] -= 2.0 * step
        lo = float(f(probe.reshape(x.shape)))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise OracleFailureError(f"non-finite function value at coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * step)
    return grad
