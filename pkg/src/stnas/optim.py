"""Parameter initialization and SGD."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import NumericError
from .seeding import rng_for
from .tensor import ParamGroup

INIT_SCHEMES = ("kaiming_uniform", "kaiming_normal", "xavier_uniform")


def _fans(shape):
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_weight(shape, scheme: str, seed: int, name: str, dtype) -> np.ndarray:
    """Draw a conv/linear weight. The stream is keyed by (seed, name) alone.

    Keying by name makes a parameter's initial value independent of which
    other operators exist, so a supernet and a single-path network built
    with the same seed share every common weight bit for bit.
    """
    fan_in, fan_out = _fans(shape)
    rng = rng_for(seed, "init", name)
    if scheme == "kaiming_uniform":
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
    elif scheme == "kaiming_normal":
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    elif scheme == "xavier_uniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    return w.astype(dtype)


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * w
    w <- w - lr * v            (or w - lr * (grad' + momentum * v) if nesterov)
    """

    def __init__(self, params: Iterable[ParamGroup], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, nesterov: bool = False):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.velocity: dict[str, np.ndarray] = {}

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocity, self.nesterov)


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0, velocity=None, nesterov=False):
    """One in-place update. ``velocity`` maps param name to its momentum buffer."""
    if velocity is None:
        velocity = {}
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"{p.name}: non-finite gradient")
    for p in params:
        dt = p.value.dtype.type
        d = p.grad + dt(weight_decay) * p.value if weight_decay else p.grad
        if momentum:
            v = velocity.get(p.name)
            v = d.copy() if v is None else dt(momentum) * v + d
            velocity[p.name] = v
            d = d + dt(momentum) * v if nesterov else v
        p.value = p.value - dt(lr) * d
    return params
