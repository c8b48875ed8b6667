"""Parameter containers: a small Module base class and a Linear layer.

Modules auto-register Tensor attributes as parameters and Module attributes
as children, so checkpoints can address every weight by a dotted name.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        """Yield (dotted_name, tensor) pairs in registration order."""
        for name, p in self.__dict__.get("_params", {}).items():
            yield (prefix + name, p)
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def load_state(self, state: dict, prefix: str = ""):
        """Copy arrays from a {name: ndarray} dict into matching parameters."""
        for name, p in self.named_parameters(prefix):
            arr = state[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"parameter {name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.data.dtype, copy=False))

    def state_arrays(self, prefix: str = "") -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}


class Linear(Module):
    """Affine map x[m,in] -> x @ w + b with w[in,out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = uniform_init(rng, (in_dim, out_dim), in_dim, dtype)
        self.has_bias = bias
        if bias:
            self.b = Tensor(np.zeros((1, out_dim), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, weight_hook=None) -> Tensor:
        w = self.w if weight_hook is None else weight_hook(self.w)
        out = x.matmul(w)
        if self.has_bias:
            b = self.b if weight_hook is None else weight_hook(self.b)
            out = out + b.gather_rows([0] * out.shape[0])
        return out
