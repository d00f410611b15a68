"""Parameter storage and the handful of layer wrappers the network needs."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Ordered, name-addressed collection of trainable tensors.

    Parameters are created in a fixed order from a seeded generator, so the
    same construction sequence always yields identical names and values.
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def new(self, name: str, shape, init="fan_in", fan_in: int | None = None) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, (int, float)):
            value = np.full(shape, float(init))
        elif isinstance(init, np.ndarray):
            value = np.array(init, dtype=np.float64).reshape(shape)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        elif init == "fan_in":
            fan = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            bound = np.sqrt(3.0 / max(fan, 1))
            value = self.rng.uniform(-bound, bound, size=shape)
        elif isinstance(init, tuple) and init[0] == "uniform":
            value = self.rng.uniform(-init[1], init[1], size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(value, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in self._params.items():
            p.assign(state[k])


class Conv2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, kernel=3, stride: int = 1,
                 padding=None, weight_init="fan_in", bias_init="zeros"):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = stride
        self.padding = padding if padding is not None else ((kh - 1) // 2, (kw - 1) // 2)
        self.weight = store.new(f"{name}.weight", (cout, cin, kh, kw), weight_init)
        self.bias = store.new(f"{name}.bias", (cout,), bias_init)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, kernel: int = 2, stride: int = 2):
        self.stride = stride
        self.weight = store.new(f"{name}.weight", (cin, cout, kernel, kernel), "fan_in", fan_in=cin)
        self.bias = store.new(f"{name}.bias", (cout,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class Linear:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, weight_init="fan_in"):
        self.weight = store.new(f"{name}.weight", (cout, cin), weight_init)
        self.bias = store.new(f"{name}.bias", (cout,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gain = store.new(f"{name}.gain", (dim,), "ones")
        self.offset = store.new(f"{name}.offset", (dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.offset)
