"""Parameter containers built on :mod:`gatedkws.numerics`."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Walks its attributes for tensors and sub-modules, in definition order."""

    def named_tensors(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def submodules(self):
        """This module and every module below it."""
        yield self
        for val in vars(self).values():
            items = val if isinstance(val, (list, tuple)) else [val]
            for item in items:
                if isinstance(item, Module):
                    yield from item.submodules()

    def named_parameters(self, prefix: str = ""):
        return [(n, t) for n, t in self.named_tensors(prefix) if t.requires_grad]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def astype(self, dtype):
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())


def _uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, 1.0 / math.sqrt(d_in), (d_in, d_out))
        self.bias = Tensor(np.zeros(d_out, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add(nx.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator):
        fan_in = c_in * kernel * kernel
        self.stride = stride
        self.weight = _uniform(rng, math.sqrt(6.0 / fan_in), (kernel, kernel, c_in, c_out))
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.add(nx.conv2d(x, self.weight, self.stride), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layernorm(x, self.gamma, self.beta)


class BatchNorm(Module):
    frozen = False  # when set, training passes use and keep the running statistics

    def __init__(self, dim: int, momentum: float = 0.1):
        self.momentum = momentum
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(dim, np.float32))
        self.running_var = Tensor(np.ones(dim, np.float32))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return nx.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean.data,
            self.running_var.data,
            training=training and not self.frozen,
            momentum=self.momentum,
        )


def freeze_batchnorm(module: Module, frozen: bool = True) -> None:
    for m in module.submodules():
        if isinstance(m, BatchNorm):
            m.frozen = frozen


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return nx.mul(x, keep)
