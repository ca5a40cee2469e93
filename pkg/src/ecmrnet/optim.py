"""Adam with strict freezing and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class IsolationError(RuntimeError):
    """A gradient arrived for a parameter that is not trainable."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              trainable: set[str] | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` (id -> Parameter).

    Parameters with no gradient entry are left untouched; moments are kept
    only for the ids in ``trainable`` (default: those with gradients).
    """
    for pid in grads:
        p = params.get(pid)
        if p is None or not p.trainable:
            raise IsolationError(f"gradient for frozen or unknown parameter {pid!r}")
    keys = set(grads) if trainable is None else set(trainable)
    for pid in list(state.m):
        if pid not in keys:
            del state.m[pid], state.v[pid]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for pid in sorted(keys):
        p = params[pid]
        if not p.trainable:
            raise IsolationError(f"parameter {pid!r} is frozen")
        g = grads.get(pid)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.get(pid)
        v = state.v.get(pid)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[pid], state.v[pid] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = (p.value - update).astype(p.value.dtype)


def cosine_lr(epoch: int, epochs: int, lr_init: float = 1e-4, lr_final: float = 1e-6) -> float:
    """Cosine annealing from ``lr_init`` at epoch 0 to ``lr_final`` at the last epoch."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if epochs == 1:
        return lr_init
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))
