"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the edge network needs are provided.  Every
operation works on plain numpy arrays; a :class:`Tensor` is a thin wrapper
that carries a ``requires_grad`` flag and an optional parameter name.

Gradients are recorded only while a :class:`GradTape` is active, so inference
pays no bookkeeping cost::

    with GradTape() as tape:
        loss = some_ops(x, w)
    grads = backward(loss, tape)
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "conv2d",
    "group_norm",
    "activation",
    "silu",
    "sigmoid",
    "linear",
    "add",
    "scale",
    "concat",
    "reshape",
    "upsample_nearest",
    "sum_all",
    "bce_with_logits",
    "sinusoidal_embed",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "set_debug",
]

_DEFAULT_DTYPE = np.float32
_DEBUG = os.environ.get("MEMO_DEBUG", "") not in ("", "0")
_TAPES: list["GradTape"] = []


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (float64 for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug(enabled: bool) -> None:
    """When enabled, every op checks its output for NaN/inf and raises."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return NotImplemented

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def _push(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
        return backward(loss, self, params)


def _record(name: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{name}: non-finite values in output")
    tape = _TAPES[-1] if _TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape._push(result, tuple(inputs), vjp)
    return result


def backward(loss: Tensor, tape: GradTape, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep over ``tape`` starting from the scalar ``loss``.

    Returns gradients keyed by name.  With ``params`` given, exactly those
    entries are returned (zeros for parameters the loss never touched);
    otherwise every named leaf reached by the sweep is returned.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise ValueError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in tape._outputs:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    if params is None:
        return {t.name: grads[k] for k, t in leaves.items() if t.name is not None}
    result = {}
    for name, t in params.items():
        g = grads.get(id(t))
        result[name] = np.zeros_like(t.data) if g is None else g
    return result


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record("add", out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        parts = []
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if not x.requires_grad:
                parts.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _record("concat", out, xs, vjp)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes."""
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, factor, w, factor)).reshape(
        n, c, h * factor, w * factor
    )

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record("upsample", out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    y = x.data * s

    def vjp(g):
        return (g * (s * (1 + x.data * (1 - s))),)

    return _record("silu", y, (x,), vjp)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` has shape [D, E]."""
    d, e = weight.shape
    if x.shape[-1] != d:
        raise ValueError(f"linear: input trailing dim {x.shape[-1]} does not match weight rows {d}")
    if bias is not None and bias.shape != (e,):
        raise ValueError(f"linear: bias shape {bias.shape} does not match ({e},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(-1, e)
        gx = (g @ weight.data.T) if x.requires_grad else None
        gw = (x.data.reshape(-1, d).T @ g2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, vjp)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, dy, dx] = xp[:, :, dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an [N, C, H, W] input with an [O, C, kh, kw] kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match ({o},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = kernel.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def vjp(g):
        g2 = g.reshape(n, o, ho * wo)
        gk = gx = gb = None
        if kernel.requires_grad:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gcols.reshape(n, c, ho, wo)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for dy in range(kh):
                    for dx in range(kw):
                        gxp[:, :, dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride] += gcols[
                            :, :, dy, dx
                        ]
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gk
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", out, inputs, vjp)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel group) to zero mean / unit variance, then scale and shift per channel."""
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xg = x.data.reshape(n, groups, -1)
    # float64 accumulation centres constant maps to exactly zero, so rounding
    # residue is not amplified by 1/sqrt(eps) in featureless (zero-image) inputs
    mean = xg.mean(axis=2, keepdims=True, dtype=np.float64).astype(xg.dtype)
    centered = xg - mean
    var = np.mean(centered * centered, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def vjp(g):
        red = (0,) + tuple(range(2, x.data.ndim))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gg, gbeta

    return _record("group_norm", out, (x, gamma, beta), vjp)


def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of binary cross-entropy terms, computed in logit space.

    ``sum_i w_i * -(t_i log p_i + (1 - t_i) log(1 - p_i))`` with ``p = sigmoid(logits)``.
    """
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    wts = np.asarray(weights, dtype=z.dtype)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((wts * per).sum(), dtype=z.dtype)

    def vjp(g):
        return (g * wts * (expit(z) - t),)

    return _record("bce_with_logits", out, (logits,), vjp)


def sinusoidal_embed(r, dim: int) -> np.ndarray:
    """Sinusoidal encoding of a scalar (or 1-D batch) with interleaved sin/cos pairs.

    Frequencies are ``10000 ** (-2k / dim)`` for ``k = 0 .. dim/2 - 1``.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    r_arr = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r_arr)):
        raise ValueError("embedding input must be finite")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = r_arr[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out.astype(_DEFAULT_DTYPE)

