"""Parameters, modules and the conv building blocks used by the network."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from tmnet import ops
from tmnet.tensor import ShapeError, Tensor


class Parameter(Tensor):
    """A named, trainable leaf tensor whose value the optimiser may rebind."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {value.shape} to {self.shape}")
        arr = value.copy()
        arr.flags.writeable = False
        self.data = arr


class Module:
    """Container with deterministic (insertion-ordered) parameter naming."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield prefix + key, p
        for key, child in self._children.items():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def _rename(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name in own:
                own[name].assign(arr)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            arr = p.data.astype(dtype)
            arr.flags.writeable = False
            p.data = arr
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def kaiming_normal(rng: np.random.Generator, shape: tuple, scale: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape) * scale


class Conv2d(Module):
    """2-d convolution; ``init`` is ``"kaiming"`` (scaled by ``scale``) or ``"zeros"``."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True, init: str = "kaiming",
                 scale: float = 1.0, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        if init == "kaiming":
            w = kaiming_normal(rng, shape, scale)
        elif init == "zeros":
            w = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w.astype(dtype))
        if bias:
            self.bias = Parameter(np.zeros(cout, dtype=dtype))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ResidualBlock(Module):
    """Conv-ReLU-Conv with identity skip; convs start scaled down for stable depth."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32, scale: float = 0.1):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng, scale=scale, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, scale=scale, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, self.conv2(ops.relu(self.conv1(x))))


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self._order = []
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
            self._order.append(layer)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self._order:
            x = layer(x)
        return x

    def __len__(self) -> int:
        return len(self._order)

    def __getitem__(self, i: int):
        return self._order[i]
