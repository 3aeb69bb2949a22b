from dataclasses import dataclass, field

import numpy as np

from main.exceptions import DimensionError
from tensor_core.tensor import Tensor


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        shapes = {name: np.shape(getattr(p, "data", p)) for name, p in params.items()}
        return cls(
            {name: np.zeros(shape) for name, shape in shapes.items()},
            {name: np.zeros(shape) for name, shape in shapes.items()},
        )


def adam_step(params, grads, state: AdamState, lr, beta1, beta2, eps):
    """
    One bias-corrected Adam update without weight decay. Returns new leaf
    parameters and a new state; the inputs are left untouched.
    """
    t = state.t + 1
    new_params, m_next, v_next = {}, {}, {}
    for name, param in params.items():
        value = getattr(param, "data", param)
        grad = np.asarray(grads.get(name, np.zeros_like(value)), dtype=np.float64)
        if grad.shape != value.shape:
            raise DimensionError(f"{name}: gradient {grad.shape} for parameter {value.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = Tensor(value - lr * m_hat / (np.sqrt(v_hat) + eps), requires_grad=True)
        m_next[name], v_next[name] = m, v
    return new_params, AdamState(m_next, v_next, t)
