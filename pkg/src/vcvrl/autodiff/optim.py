from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for :func:`adam_step`."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One in-place Adam update with bias correction.

    Weight decay is decoupled: ``lr * weight_decay * theta`` is subtracted
    separately from the adaptive step.  A ``None`` gradient counts as zero.
    """
    if len(params) != len(state.m):
        raise ValueError(f"optimizer tracks {len(state.m)} parameters, got {len(params)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr, wd, eps = state.learning_rate, state.weight_decay, state.epsilon
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != m.shape:
            raise ValueError(f"parameter shape {p.shape} does not match moment buffer {m.shape}")
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if wd:
            update = update + lr * wd * p
        p -= update.astype(p.dtype, copy=False)


@dataclass
class Adam:
    """Thin wrapper binding an :class:`AdamState` to a list of tensors."""

    params: List[Tensor]
    lr: float = 1e-3
    weight_decay: float = 1e-4
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params(
            [p.data for p in self.params], learning_rate=self.lr, weight_decay=self.weight_decay
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
