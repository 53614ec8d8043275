"""Minimal layer containers on top of :mod:`cinegru.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ParameterSet, Tensor


class Module:
    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            path = prefix + name
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            else:
                yield from value.named_parameters(path + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(prefix + name + ".")

    def parameters(self) -> ParameterSet:
        return ParameterSet(self.named_parameters())

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules():
            for bname in getattr(mod, "_buffer_names", ()):
                value = getattr(mod, bname)
                if value is not None:
                    yield (f"{path}.{bname}" if path else bname), value

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        missing = [k for k in params if k not in state]
        if strict and missing:
            raise KeyError(f"missing parameters in state: {missing}")
        for k, p in params.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise T.ShapeError(f"{k}: stored shape {arr.shape} != parameter shape {p.shape}")
                p.data[...] = arr
        mods = dict(self.named_modules())
        for path, mod in mods.items():
            for bname in getattr(mod, "_buffer_names", ()):
                key = f"{path}.{bname}" if path else bname
                if key in state:
                    setattr(mod, bname, np.asarray(state[key], dtype=mod.dtype).copy())

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            if hasattr(m, "dtype"):
                m.dtype = np.dtype(dtype)
            for bname in getattr(m, "_buffer_names", ()):
                v = getattr(m, bname)
                if v is not None:
                    setattr(m, bname, v.astype(dtype))
        return self


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng: np.random.Generator, stride=1, padding=None, bias=False, dtype=np.float32):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        fan_in = cin * k * k
        self.weight = _param((rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype))
        self.bias = _param(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.dtype = np.dtype(dtype)
        self.momentum = momentum
        self.eps = eps
        self.gamma = _param(np.ones(c, dtype=dtype))
        self.beta = _param(np.zeros(c, dtype=dtype))
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        out, rm, rv = T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )
        if self.training:
            self.running_mean, self.running_var = rm.astype(self.dtype), rv.astype(self.dtype)
        return out


class Linear(Module):
    def __init__(self, fin, fout, rng: np.random.Generator, dtype=np.float32):
        self.weight = _param((rng.standard_normal((fout, fin)) * np.sqrt(1.0 / fin)).astype(dtype))
        self.bias = _param(np.zeros(fout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with an identity (or 1x1 projection) shortcut."""

    def __init__(self, cin, cout, stride, rng, dtype=np.float32):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype)
        if stride != 1 or cin != cout:
            self.down_conv = Conv2d(cin, cout, 1, rng, stride=stride, padding=0, dtype=dtype)
            self.down_bn = BatchNorm2d(cout, dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        return T.relu(out + short)
