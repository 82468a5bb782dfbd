"""Dense float64 linear algebra plus derivative checking utilities.

Tensors are plain C-contiguous float64 numpy arrays. There is deliberately no
broadcasting: every shape mismatch is a hard error, because silent
broadcasting hides bugs in search and quantization code. All math runs in
64-bit; reduced precision exists only as quantized storage elsewhere.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray
GradFn = Callable[[Array], Array]
LossFn = Callable[[Array], float]


def as_tensor(values, shape=None) -> Array:
    """Coerce to a float64 array, optionally validating its shape."""
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def check_finite(arr: Array, what: str = "tensor") -> Array:
    """Raise NumericError unless every entry is finite."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains NaN or Inf")
    return arr


def matmul(a: Array, b: Array) -> Array:
    """Strict 2-D matrix product; inner dimensions must agree exactly."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def grad_check(loss: LossFn, grad: GradFn, theta: Array, eps: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    Per coordinate the error is |analytic - numeric| / (|analytic| + 1e-8);
    the maximum over coordinates is returned.
    """
    theta = as_tensor(theta)
    analytic = as_tensor(grad(theta))
    if analytic.shape != theta.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != parameter shape {theta.shape}")
    flat = theta.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        lo = float(loss((flat - bump).reshape(theta.shape)))
        hi = float(loss((flat + bump).reshape(theta.shape)))
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise NumericError("loss is non-finite during gradient check")
        numeric[i] = (hi - lo) / (2.0 * eps)
    diff = np.abs(analytic.ravel() - numeric)
    return float(np.max(diff / (np.abs(analytic.ravel()) + 1e-8)))


def hvp_step_size(theta: Array, v: Array) -> float:
    """Finite-difference step for hvp, scaled to parameter and probe magnitude."""
    return 1e-4 * (1.0 + float(np.max(np.abs(theta), initial=0.0))) / (
        float(np.max(np.abs(v), initial=0.0)) + 1e-12
    )


def hvp(grad: GradFn, theta: Array, v: Array, eps: float | None = None) -> Array:
    """Hessian-vector product via central differences of the gradient.

    Computes (grad(theta + eps*v) - grad(theta - eps*v)) / (2*eps), which
    avoids any second-order autodiff machinery. v must match theta's shape.
    """
    theta = as_tensor(theta)
    v = as_tensor(v)
    if v.shape != theta.shape:
        raise ShapeError(f"probe shape {v.shape} != parameter shape {theta.shape}")
    if eps is None:
        eps = hvp_step_size(theta, v)
    g_hi = as_tensor(grad(theta + eps * v))
    g_lo = as_tensor(grad(theta - eps * v))
    out = (g_hi - g_lo) / (2.0 * eps)
    return check_finite(out, "hvp result")
