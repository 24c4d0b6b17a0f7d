"""Fully connected building blocks."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Anything owning named parameters (directly or through children)."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = set(params) - set(state)
            unknown = set(state) - set(params)
            if missing or unknown:
                raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, p in params.items():
            if name in state:
                if state[name].shape != p.shape:
                    raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
                p.data = np.array(state[name], dtype=T.DTYPE)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        # He-normal init suits the relu stacks used throughout
        std = scale * np.sqrt(2.0 / max(n_in, 1))
        self.W = Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class MLP(Module):
    """Linear layers with relu between them (none after the last)."""

    def __init__(self, n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator,
                 activation: str = "relu", final_scale: float = 1.0):
        sizes = [n_in, *hidden, n_out]
        n = len(sizes) - 1
        self.layers = [Linear(a, b, rng, final_scale if i == n - 1 else 1.0)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.activation = activation
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.unary(self.activation, x)
        return x
