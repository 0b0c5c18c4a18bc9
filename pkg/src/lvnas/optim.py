"""Adam with bias correction and a linear warmup / linear decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tensor import Parameter


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> peak over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


def no_decay(name: str) -> bool:
    """Biases, norm affines and the output bias are exempt from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith(("b_", "ln_")) or leaf.endswith("bias")


@dataclass
class _Moments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class Adam:
    """Adam over a name -> Parameter mapping.

    Moments and the bias-correction step count live per parameter, so a
    parameter left out of :meth:`step` keeps its state frozen.  ``t`` counts
    calls to :meth:`step`; the learning rate is ``schedule(t)`` after the
    increment.  Weight decay is decoupled: ``θ -= lr * wd * θ``.
    """

    params: dict[str, Parameter]
    lr: float | Callable[[int], float] = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    t: int = 0
    state: dict[str, _Moments] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, p in self.params.items():
            self.state.setdefault(name, _Moments(np.zeros_like(p.value), np.zeros_like(p.value)))

    def current_lr(self) -> float:
        return self.lr(self.t) if callable(self.lr) else float(self.lr)

    def step(self, names: Iterable[str] | None = None) -> None:
        self.t += 1
        lr = self.current_lr()
        for name in self.params if names is None else names:
            p, st = self.params[name], self.state[name]
            adam_update(p, st, lr, self.beta1, self.beta2, self.eps,
                        0.0 if no_decay(name) else self.weight_decay)


def adam_update(p: Parameter, st: _Moments, lr, beta1, beta2, eps, weight_decay=0.0) -> None:
    g = p.grad
    if g.shape != p.value.shape or st.m.shape != g.shape:
        raise ValueError(f"shape mismatch: value {p.value.shape}, grad {g.shape}, moments {st.m.shape}")
    st.t += 1
    st.m *= beta1
    st.m += (1.0 - beta1) * g
    st.v *= beta2
    st.v += (1.0 - beta2) * g * g
    mhat = st.m / (1.0 - beta1**st.t)
    vhat = st.v / (1.0 - beta2**st.t)
    if weight_decay:
        p.value -= lr * weight_decay * p.value
    p.value -= lr * mhat / (np.sqrt(vhat) + eps)


def first_step_update(g: float, lr: float, eps: float = 1e-6) -> float:
    """Closed form of Adam's first update for gradient ``g`` from zero moments."""
    return -lr * g / (math.fabs(g) + eps)
