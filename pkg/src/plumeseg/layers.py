"""Named parameter store, initializers, and the small trainable layer set."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError

# Param kinds drive weight-decay exemption: "norm" and "bias" are exempt.
KIND_WEIGHT = "weight"
KIND_BIAS = "bias"
KIND_NORM = "norm"


class Param:
    """A named trainable array. Training replaces .data; layers keep the ref."""

    __slots__ = ("name", "data", "kind")

    def __init__(self, name: str, data: np.ndarray, kind: str):
        self.name = name
        self.data = data
        self.kind = kind

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Param({self.name}, shape={self.data.shape}, kind={self.kind})"


class ParamStore:
    """Ordered registry of all parameters of one model."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}

    def add(self, name: str, data: np.ndarray, kind: str) -> Param:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        p = Param(name, np.ascontiguousarray(data, dtype=self.dtype), kind)
        self._params[name] = p
        return p

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def total_size(self) -> int:
        return sum(p.size for p in self._params.values())


class Binding:
    """Per-forward map from Param to (possibly tape-watched) Tensor."""

    def __init__(self, tape: T.GradTape | None = None):
        self.tape = tape
        self._bound: dict[int, T.Tensor] = {}

    def get(self, p: Param) -> T.Tensor:
        t = self._bound.get(id(p))
        if t is None:
            t = self.tape.watch(p.data) if self.tape is not None else T.Tensor(p.data)
            self._bound[id(p)] = t
        return t

    def node_of(self, p: Param) -> int | None:
        t = self._bound.get(id(p))
        return None if t is None else t.node


# ---------------------------------------------------------------------------
# initializers

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def conv_fan_out(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    cout, _, k, _ = shape
    fan_out = k * k * cout // groups
    return rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape)


# ---------------------------------------------------------------------------
# layers

class Conv2d:
    def __init__(self, store: ParamStore, rng, name: str, cin: int, cout: int,
                 k: int, stride: int = 1, pad: int = 0, groups: int = 1,
                 bias: bool = True):
        self.stride, self.pad, self.groups = stride, pad, groups
        self.w = store.add(f"{name}.weight",
                           conv_fan_out(rng, (cout, cin // groups, k, k), groups),
                           KIND_WEIGHT)
        self.b = store.add(f"{name}.bias", np.zeros(cout), KIND_BIAS) if bias else None

    def forward(self, x: T.Tensor, b: Binding) -> T.Tensor:
        bias = b.get(self.b) if self.b is not None else None
        return T.conv2d(x, b.get(self.w), bias, stride=self.stride,
                        pad=self.pad, groups=self.groups)


class Linear:
    def __init__(self, store: ParamStore, rng, name: str, cin: int, cout: int,
                 bias: bool = True):
        self.w = store.add(f"{name}.weight", trunc_normal(rng, (cin, cout)), KIND_WEIGHT)
        self.b = store.add(f"{name}.bias", np.zeros(cout), KIND_BIAS) if bias else None

    def forward(self, x: T.Tensor, b: Binding) -> T.Tensor:
        y = T.matmul(x, b.get(self.w))
        if self.b is not None:
            y = T.add(y, b.get(self.b))
        return y


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.g = store.add(f"{name}.gamma", np.ones(dim), KIND_NORM)
        self.bt = store.add(f"{name}.beta", np.zeros(dim), KIND_NORM)

    def forward(self, x: T.Tensor, b: Binding) -> T.Tensor:
        return T.layer_norm(x, b.get(self.g), b.get(self.bt), self.eps)


class GroupNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, groups: int,
                 eps: float = 1e-6):
        self.groups, self.eps = groups, eps
        self.g = store.add(f"{name}.gamma", np.ones(channels), KIND_NORM)
        self.bt = store.add(f"{name}.beta", np.zeros(channels), KIND_NORM)

    def forward(self, x: T.Tensor, b: Binding) -> T.Tensor:
        return T.group_norm_2d(x, b.get(self.g), b.get(self.bt), self.groups, self.eps)
