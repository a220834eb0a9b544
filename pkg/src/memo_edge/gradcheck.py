"""Central finite-difference checks for the autodiff operations."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import GradTape, Tensor, backward, precision


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, eps: float = 1e-6) -> np.ndarray:
    """d fn / d inputs[index] by central differences; ``fn`` must return a scalar tensor."""
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = fn(*inputs).item()
        flat[i] = old - eps
        lo = fn(*inputs).item()
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


def analytic_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    named = {f"in{i}": t for i, t in enumerate(inputs)}
    with GradTape() as tape:
        loss = fn(*inputs)
    grads = backward(loss, tape, named)
    return [grads[f"in{i}"] for i in range(len(inputs))]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm error relative to the larger max-norm (0 when both vanish)."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> list[float]:
    """Relative error of the analytic gradient of every input, computed in float64."""
    with precision(np.float64):
        inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        analytic = analytic_gradients(fn, inputs)
        return [relative_error(analytic[i], numerical_gradient(fn, inputs, i, eps)) for i in range(len(inputs))]
