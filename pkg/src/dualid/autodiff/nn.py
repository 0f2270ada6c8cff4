"""Parameters, modules and the handful of layers the models are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``frozen`` parameters do not record gradients and are skipped by the
    optimizer.  ``name`` is filled in by the owning :class:`Module`.
    """

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(np.array(data, dtype=dtype or np.asarray(data).dtype, copy=True), requires_grad=not frozen)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.name = name

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.requires_grad = not value

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class Module:
    """Minimal container: parameters are discovered from instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = full
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{full}.{i}"
                        yield item.name, item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
            p.grad = None
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            extra = set(state) - set(params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise T.ShapeError(f"load_state_dict: {name} has shape {arr.shape}, expected {p.shape}")
            p.data = np.array(arr, dtype=arr.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        self.weight = Parameter(_uniform(rng, (d_in, d_out), init_scale / np.sqrt(d_in)))
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, np.float32))
        self.bias = Parameter(np.zeros(dim, np.float32))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1,
                 init_scale: float = 1.0):
        self.weight = Parameter(_uniform(rng, (3, 3, c_in, c_out), init_scale / np.sqrt(9 * c_in)))
        self.bias = Parameter(np.zeros(c_out, np.float32))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3x3(x, self.weight, self.bias, self.stride)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 1.0):
        self.weight = Parameter((rng.standard_normal((n, dim)) * std).astype(np.float32))

    def forward(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, d_out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, d_out or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head attention with separate q/k/v/out projections.

    ``context`` defaults to ``x`` (self-attention).
    """

    def __init__(self, dim: int, rng: np.random.Generator, context_dim: int | None = None,
                 heads: int = 1):
        cdim = context_dim or dim
        self.to_q = Linear(dim, dim, rng, bias=False)
        self.to_k = Linear(cdim, dim, rng, bias=False)
        self.to_v = Linear(cdim, dim, rng, bias=False)
        self.to_out = Linear(dim, dim, rng)
        self.heads = heads

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        ctx = x if context is None else context
        h = T.attention(self.to_q(x), self.to_k(ctx), self.to_v(ctx), self.heads)
        return self.to_out(h)
