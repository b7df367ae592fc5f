"""SGD with momentum and L2 weight decay."""
from __future__ import annotations

from typing import Mapping, Sequence, Union

import numpy as np

from .tensor import Tensor

Params = Union[Mapping[str, Tensor], Sequence[Tensor]]


def _named(params: Params):
    if isinstance(params, Mapping):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def sgd_step(
    params: Params,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    velocity: dict | None = None,
) -> dict:
    """One update ``v = momentum*v + grad + wd*param; param -= lr*v``, then zero grads.

    Tensors with ``requires_grad=False`` are skipped entirely (frozen). A
    trainable tensor without a gradient is treated as having a zero gradient.
    Returns the velocity dict, keyed by parameter name (or list index).
    """
    if velocity is None:
        velocity = {}
    for name, p in _named(params):
        if not p.requires_grad:
            continue
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocity[name] = v
        v *= p.dtype.type(momentum)
        v += grad
        if weight_decay:
            v += p.dtype.type(weight_decay) * p.data
        p.data -= p.dtype.type(lr) * v
        p.grad = None
    return velocity
