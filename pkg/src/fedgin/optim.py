"""AdamW with decoupled weight decay and a reduce-on-plateau learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import MutableMapping

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass
class AdamWState:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(state: AdamWState, params: MutableMapping[str, np.ndarray], grads: dict) -> None:
    """Update ``params`` in place for every name present in ``grads``.

    Decay is applied first (``p *= 1 - lr*wd``), then the bias-corrected
    Adam step.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step_count += 1
    t = state.step_count
    lr = np.float32(state.lr)
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    bc1 = np.float32(1.0 - state.beta1 ** t)
    bc2_sqrt = np.float32(math.sqrt(1.0 - state.beta2 ** t))
    decay = np.float32(1.0 - state.lr * state.weight_decay)
    for name, g in grads.items():
        p = params[name]
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            p *= decay
        p -= (lr / bc1) * m / (np.sqrt(v) / bc2_sqrt + np.float32(state.eps))


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    best: float = math.inf
    bad_evals: int = 0


def plateau_scheduler_step(state: PlateauState, validation_loss: float) -> float:
    """Record one evaluation; returns the (possibly reduced) learning rate."""
    if validation_loss < state.best - state.min_delta:
        state.best = validation_loss
        state.bad_evals = 0
    else:
        state.bad_evals += 1
        if state.bad_evals >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.bad_evals = 0
    return state.lr
