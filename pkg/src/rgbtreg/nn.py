"""Minimal layer containers over the autodiff engine.

Parameters are requires_grad tensors discovered by walking module
attributes; their dotted names are stable and used for checkpointing.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, matmul
from .errors import ContractError
from .netops import conv2d, layer_norm


class Module:
    """Base container; children and parameters register via attribute order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_params(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{key}.{i}."))
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        cin: int,
        cout: int,
        kernel: int,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
        zero_init: bool = False,
    ):
        if cin % groups or cout % groups:
            raise ContractError(f"channels {cin}->{cout} not divisible by groups {groups}")
        fan_in = (cin // groups) * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        shape = (cout, cin // groups, kernel, kernel)
        self.w = param(np.zeros(shape) if zero_init else rng.normal(0.0, std, shape))
        self.b = param(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding, groups=self.groups)


class Linear(Module):
    """Token-wise affine map: (N, C_in) -> (N, C_out)."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, bias: bool = True):
        std = np.sqrt(1.0 / cin)
        self.w = param(rng.normal(0.0, std, (cin, cout)))
        self.b = param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, axis: int = -1, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.axis = axis
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, axis=self.axis, eps=self.eps)
