"""Adam with bias correction.

`adam_step` is the functional core; `Adam` wraps it with lazily created
per-parameter state so a training loop can step an arbitrary subset of
parameters each batch (pool pairs that were not selected keep their
moments and values untouched, which is what gives prompt-pair isolation
its bitwise guarantee).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import ShapeError


@dataclass
class AdamState:
    """Moment estimates for one parameter array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, learning_rate: float = 1e-3,
                  beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(first_moment=np.zeros_like(param), second_moment=np.zeros_like(param),
                   learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Apply one bias-corrected Adam update in place; returns (param, state)."""
    if param.shape != grad.shape:
        raise ShapeError(f"grad shape {grad.shape} does not match param {param.shape}")
    if state.first_moment.shape != param.shape:
        raise ShapeError(f"state moments shaped {state.first_moment.shape} do not match param {param.shape}")
    state.step_count += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step_count)
    param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return param, state


class Adam:
    """Steps a set of Tensors, keeping independent AdamState per tensor."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._states: dict[int, AdamState] = {}

    def state_for(self, param: Tensor) -> AdamState:
        st = self._states.get(id(param))
        if st is None:
            st = AdamState.for_param(param.data, self.lr, self.beta1, self.beta2, self.eps)
            self._states[id(param)] = st
        return st

    def step(self, params: list[Tensor]) -> None:
        for p in params:
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.state_for(p))

    def zero_grad(self, params: list[Tensor]) -> None:
        for p in params:
            p.zero_grad()
