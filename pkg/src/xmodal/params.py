"""Named parameter storage with order-independent, seed-derived initialization.

Each parameter is drawn from its own splitmix64 stream keyed by the global
seed and an FNV-1a hash of its dotted name, so building modules in a
different order never changes any value.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64(state: int, n: int) -> np.ndarray:
    """First ``n`` outputs of a splitmix64 generator started at ``state``."""
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state & _MASK) + steps * np.uint64(_GAMMA)
        return _mix(z)


def uniform01(state: int, n: int) -> np.ndarray:
    return (splitmix64(state, n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def param_seed(seed: int, name: str) -> int:
    return ((seed * _GAMMA) ^ fnv1a64(name)) & _MASK


def init_values(seed: int, name: str, shape, kind: str) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind != "xavier":
        raise ConfigError(f"unknown initializer {kind!r}")
    n = int(np.prod(shape))
    if len(shape) >= 2:
        fan_in, fan_out = int(np.prod(shape[:-1])), shape[-1]
    else:
        fan_in = fan_out = max(n, 1)
    a = math.sqrt(6.0 / max(fan_in + fan_out, 1))
    u = uniform01(param_seed(seed, name), n)
    # stored in single precision so checkpoints reload bit-exactly
    return ((2.0 * u - 1.0) * a).astype(np.float32).astype(np.float64).reshape(shape)


class ParamStore:
    """Flat ``name -> Tensor`` registry shared by every module of a pipeline."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, shape, init: str = "xavier") -> Tensor:
        if name in self._params:
            existing = self._params[name]
            if existing.shape != tuple(shape):
                raise ShapeError(f"parameter {name} re-declared with shape {tuple(shape)}")
            return existing
        t = Tensor(init_values(self.seed, name, shape, init), requires_grad=True)
        self._params[name] = t
        return t

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def named_parameters(self):
        return sorted(self._params.items())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def quantize_(self) -> None:
        """Round every parameter to the nearest single-precision value."""
        limit = float(np.finfo(np.float32).max)
        for name, t in self._params.items():
            if not (np.abs(t.data) <= limit).all():
                raise NumericError(f"parameter {name} left the float32 range")
            t.data[...] = t.data.astype(np.float32)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None


class Scope:
    """A dotted-name prefix into a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def param(self, name: str, shape, init: str = "xavier") -> Tensor:
        return self.store.create(f"{self.prefix}.{name}" if self.prefix else name, shape, init)

    def sub(self, name) -> "Scope":
        return Scope(self.store, f"{self.prefix}.{name}" if self.prefix else str(name))
