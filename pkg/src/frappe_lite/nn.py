"""Parameter containers and the small layer set the policy is built from."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .autograd import Tensor, ops


def param(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)


def init_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


def init_fan_in(rng: np.random.Generator, d_in: int, d_out: int) -> Tensor:
    return init_normal(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))


class Module:
    """Registers Tensor attributes as parameters and Module attributes as children."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self._children[name] = ModuleList(value)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data) for k, p in self.named_parameters(prefix))

    def load_state_dict(self, state: dict, prefix: str = "", strict: bool = True) -> list[str]:
        """Copy matching arrays in place; returns the names that were missing."""
        missing = []
        for name, p in self.named_parameters(prefix):
            if name not in state:
                missing.append(name)
                continue
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return missing

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        for i, m in enumerate(modules):
            self._children[str(i)] = m
        object.__setattr__(self, "_items", list(modules))

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as (d_in, d_out).

    ``adapter`` is an optional callable returning an additive low-rank delta
    for this layer's input (see :mod:`frappe_lite.mipa`).
    """

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = param(np.zeros((d_in, d_out))) if zero else init_fan_in(rng, d_in, d_out)
        if bias:
            self.bias = param(np.zeros(d_out))
        else:
            object.__setattr__(self, "bias", None)
        object.__setattr__(self, "adapter_key", None)

    def __call__(self, x: Tensor, adapters=None) -> Tensor:
        y = ops.linear(x, self.weight, self.bias)
        if adapters is not None and self.adapter_key is not None:
            delta = adapters.delta(self.adapter_key, x)
            if delta is not None:
                y = y + delta
        return y


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = param(np.ones(d))
        self.shift = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x) * self.gain + self.shift


def registry_hash(named: dict | list) -> str:
    """SHA-256 over names, shapes and raw bytes of a parameter registry."""
    items = named.items() if isinstance(named, dict) else named
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    return h.hexdigest()
