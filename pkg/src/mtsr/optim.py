"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


class AdamState:
    """First/second moment accumulators for one named parameter set."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, epsilon_hat=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon_hat = epsilon_hat
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on params.

    Descent direction; a caller wanting ascent negates its loss.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.epsilon_hat)).astype(p.data.dtype)
    return params, state


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.grad = None


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}
