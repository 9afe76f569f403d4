"""Xavier initialisation and the Adam optimiser."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


def fans(shape) -> tuple[int, int]:
    """Fan-in and fan-out; conv kernels (O, C, kh, kw) count the receptive field."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        fan_out, fan_in = shape
    elif len(shape) >= 3:
        rf = int(np.prod(shape[2:]))
        fan_out, fan_in = shape[0] * rf, shape[1] * rf
    else:
        raise ValueError(f"cannot derive fans from shape {shape}")
    if fan_in == 0 or fan_out == 0:
        raise ValueError(f"zero fan for shape {shape}")
    return fan_in, fan_out


def xavier_init(shape, seed, dtype=np.float32) -> np.ndarray:
    """Uniform Glorot initialisation in ``+-sqrt(6 / (fan_in + fan_out))``."""
    fan_in, fan_out = fans(shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, l2: float = 0.0,
              regularized=None, weight_decay: float = 0.0) -> dict:
    """One bias-corrected Adam update, applied in place and returned.

    ``l2`` adds ``l2 * p`` to the gradient of every name in ``regularized``
    (all parameters when it is ``None``).  ``weight_decay`` is a decoupled
    shrink ``p -= lr * weight_decay * p``, off by default.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if l2 and (regularized is None or name in regularized):
            g = g + l2 * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay:
            step = step + lr * weight_decay * p
        p -= step.astype(p.dtype, copy=False)
    return params
