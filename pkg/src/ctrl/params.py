"""Named parameter registry shared by model components and optimizers.

Parameters are immutable DTensors keyed by hierarchical names
("collab.emb.gender", "text.block0.attn.wq", ...). The optimizer is the
single writer: it replaces entries with successor tensors. Buffers
(batch-norm running statistics) are plain mutable arrays alongside.
"""

from __future__ import annotations

import zlib
from typing import Iterable, Optional

import numpy as np

from .autodiff import DTensor
from .exceptions import UsageError


def rng_for(seed: int, tag: str) -> np.random.Generator:
    """Deterministic per-component random stream.

    Independent of how much randomness other components consume, so two
    runs that share a seed initialize a given component identically.
    """
    if seed < 0:
        raise UsageError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([seed, zlib.crc32(tag.encode("utf-8"))])
    return np.random.Generator(np.random.PCG64(ss))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: Optional[tuple] = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class ParamStore:
    def __init__(self):
        self._params: dict[str, DTensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, array) -> DTensor:
        if name in self._params:
            raise UsageError(f"parameter '{name}' already registered")
        p = DTensor(array, requires_grad=True)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> DTensor:
        try:
            return self._params[name]
        except KeyError:
            raise UsageError(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def replace(self, name: str, tensor: DTensor) -> None:
        if name not in self._params:
            raise UsageError(f"unknown parameter '{name}'")
        self._params[name] = tensor

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def add_buffer(self, name: str, array) -> np.ndarray:
        if name in self._buffers:
            raise UsageError(f"buffer '{name}' already registered")
        arr = np.array(array, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def buffer(self, name: str) -> np.ndarray:
        try:
            return self._buffers[name]
        except KeyError:
            raise UsageError(f"unknown buffer '{name}'") from None

    def buffer_names(self) -> list[str]:
        return sorted(self._buffers)

    def total_size(self) -> int:
        return sum(p.size for p in self._params.values())

    def snapshot(self) -> tuple[dict, dict]:
        """Cheap state capture: tensors are immutable, buffers are copied."""
        return dict(self._params), {n: b.copy() for n, b in self._buffers.items()}

    def restore(self, snap: tuple[dict, dict]) -> None:
        params, buffers = snap
        self._params = dict(params)
        for n, b in buffers.items():
            self._buffers[n][...] = b

    def load_arrays(self, params: dict[str, np.ndarray],
                    buffers: Optional[dict[str, np.ndarray]] = None,
                    prefix: str = "") -> None:
        """Overwrite matching entries from raw arrays (checkpoint restore)."""
        for name, arr in params.items():
            full = prefix + name
            if full in self._params:
                if self._params[full].shape != arr.shape:
                    raise UsageError(
                        f"parameter '{full}' shape {self._params[full].shape} "
                        f"does not match stored {arr.shape}")
                self._params[full] = DTensor(arr, requires_grad=True)
        for name, arr in (buffers or {}).items():
            full = prefix + name
            if full in self._buffers:
                self._buffers[full][...] = arr

    def export_arrays(self, names: Optional[Iterable[str]] = None):
        """(params, buffers) as plain arrays, for checkpointing."""
        keys = sorted(names) if names is not None else self.names()
        params = {n: np.asarray(self._params[n].data) for n in keys}
        buffers = {n: self._buffers[n].copy() for n in self.buffer_names()}
        return params, buffers
