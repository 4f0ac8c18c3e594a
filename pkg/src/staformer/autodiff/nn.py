"""Parameters, modules and the few layers every block is built from."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ..errors import ConfigurationError
from . import ops
from .tensor import DEFAULT_DTYPE, Tensor, gelu

INIT_SPECS = ("xavier_uniform", "zeros", "identity", "ones")


class Parameter(Tensor):
    """Trainable leaf tensor that remembers how it was initialised."""

    def __init__(self, data, init_spec: str = "xavier_uniform", name: str = ""):
        super().__init__(data, requires_grad=True)
        self.init_spec = init_spec
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, init={self.init_spec})"


def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...], dtype=DEFAULT_DTYPE) -> np.ndarray:
    if len(shape) == 1:
        fan_in, fan_out = 1, shape[0]
    else:
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def identity_init(shape: Tuple[int, ...], dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Identity matrix, or a centred delta kernel for ``[k, k, c, c]`` shapes."""
    out = np.zeros(shape, dtype=dtype)
    if len(shape) == 2:
        n = min(shape)
        out[np.arange(n), np.arange(n)] = 1.0
    elif len(shape) == 4:
        kh, kw, cin, cout = shape
        n = min(cin, cout)
        out[kh // 2, kw // 2, np.arange(n), np.arange(n)] = 1.0
    else:
        raise ConfigurationError(f"identity init undefined for shape {shape}")
    return out


class Init:
    """Deterministic parameter factory shared by a model under construction."""

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def __call__(self, shape, spec: str = "xavier_uniform") -> Parameter:
        shape = tuple(int(s) for s in shape)
        if spec == "xavier_uniform":
            data = xavier_uniform(self.rng, shape, self.dtype)
        elif spec == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif spec == "ones":
            data = np.ones(shape, dtype=self.dtype)
        elif spec == "identity":
            data = identity_init(shape, self.dtype)
        else:
            raise ConfigurationError(f"unknown init spec {spec!r}; expected one of {INIT_SPECS}")
        return Parameter(data, init_spec=spec)


class Module:
    """Container that discovers parameters and child modules by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = name
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{name}.{i}"
                        yield item.name, item

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigurationError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, init: Init, d_in: int, d_out: int, weight_init: str = "xavier_uniform"):
        self.weight = init((d_in, d_out), weight_init)
        self.bias = init((d_out,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, init: Init, d: int, eps: float = 1e-5):
        self.gamma = init((d,), "ones")
        self.beta = init((d,), "zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, init: Init, d: int, hidden: int, d_out: Optional[int] = None):
        self.fc1 = Linear(init, d, hidden)
        self.fc2 = Linear(init, hidden, d if d_out is None else d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
