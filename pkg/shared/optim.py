from dataclasses import dataclass, field
import logging

import numpy as np

from shared.autodiff import Tensor
from shared.errors import NonFiniteError, ShapeError


logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction. Returns new parameter arrays; ``state`` is advanced in place."""
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    for key, grad in grads.items():
        if key not in params:
            raise ShapeError(f"gradient for unknown parameter '{key}'")
        if grad.shape != params[key].shape:
            raise ShapeError(f"gradient '{key}' has shape {grad.shape}, parameter has {params[key].shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient for '{key}' at step {state.t + 1}; step aborted")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    updated = {}
    for key, value in params.items():
        grad = grads.get(key)
        if grad is None:
            updated[key] = value
            continue
        m = state.m.get(key, np.zeros_like(value))
        v = state.v.get(key, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad**2
        state.m[key], state.v[key] = m, v
        updated[key] = value - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return updated, state


class Adam:
    """Adam over a fixed set of named parameter tensors, updated in place."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        grads = {key: p.grad for key, p in self.params.items() if p.grad is not None}
        values = {key: p.data for key, p in self.params.items()}
        updated, _ = adam_step(values, grads, self.state)
        for key, param in self.params.items():
            param.data[...] = updated[key]

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None
