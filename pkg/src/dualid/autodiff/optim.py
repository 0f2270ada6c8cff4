"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: list[Parameter], state: OptimizerState) -> None:
    """Apply one AdamW update to every unfrozen parameter, then clear grads.

    Raises
    ------
    ValueError
        If an unfrozen parameter has no gradient.
    """
    live = [p for p in params if not p.frozen]
    for p in live:
        if p.grad is None:
            raise ValueError(f"adamw_step: parameter {p.name or '<unnamed>'} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr = state.learning_rate
    for i, p in enumerate(live):
        key = p.name or f"#{i}"
        g = p.grad.astype(p.dtype, copy=False)
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[key] = m
        state.second_moment[key] = v
        if state.weight_decay:
            p.data = p.data * p.dtype.type(1.0 - lr * state.weight_decay)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.data = (p.data - lr * step).astype(p.dtype, copy=False)
    for p in params:
        p.grad = None


class AdamW:
    """Stateful wrapper binding a parameter list to an :class:`OptimizerState`."""

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(learning_rate=lr, weight_decay=weight_decay,
                                    beta1=betas[0], beta2=betas[1], epsilon=eps)

    def step(self) -> None:
        adamw_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
