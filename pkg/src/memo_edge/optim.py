"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState) -> AdamWState:
    """Apply one AdamW update to every parameter with ``requires_grad`` set.

    Parameters are rebound to fresh arrays rather than modified in place, so
    callers holding a reference to the old ``data`` keep a stable snapshot.
    """
    trainable = {name: p for name, p in params.items() if p.requires_grad}
    missing = [name for name in trainable if name not in grads]
    if missing:
        raise ValueError(f"missing gradients for trainable parameters: {missing[:5]}")
    for name, p in trainable.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, parameter has {p.shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in trainable.items():
        g = grads[name].astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = p.data * (1 - state.lr * state.weight_decay) - state.lr * update
        p.data = new.astype(p.data.dtype, copy=False)
    return state
