"""Named parameter registry with paired gradient/Adam buffers, plus the
binary checkpoint format (magic "XAGN", 64-bit little-endian values)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

CHECKPOINT_MAGIC = b"XAGN"
CHECKPOINT_VERSION = 1


class Param:
    """One trainable array: value, gradient, and lazily allocated Adam moments."""

    __slots__ = ("name", "value", "grad", "m", "v")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None


class ParamStore:
    """Insertion-ordered registry of parameters and persistent buffers.

    Buffers (batchnorm running statistics) are not trained but are part of
    the checkpoint state; parameter names are stable across runs with the
    same configuration, which is what makes checkpoints portable.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params or name in self._buffers:
            raise ConfigError(f"duplicate parameter name: {name}")
        param = Param(name, value)
        self._params[name] = param
        return param

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise ConfigError(f"duplicate buffer name: {name}")
        self._buffers[name] = value
        return value

    def params(self):
        return self._params.values()

    def names(self) -> list[str]:
        return list(self._params)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def count_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def state_entries(self):
        """All persistent state, parameters first, then buffers."""
        for name, p in self._params.items():
            yield name, p.value
        for name, buf in self._buffers.items():
            yield name, buf

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_entries()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr in self.state_entries():
            arr[...] = snapshot[name]

    def _state_target(self, name: str) -> np.ndarray:
        if name in self._params:
            return self._params[name].value
        if name in self._buffers:
            return self._buffers[name]
        raise ConfigError(f"checkpoint entry {name!r} does not exist in this network")


def save_checkpoint(path, store: ParamStore) -> None:
    entries = list(store.state_entries())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, store: ParamStore) -> None:
    """Load a checkpoint into an existing store; shapes must match exactly."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        target = store._state_target(name)
        if target.shape != tuple(dims):
            raise ConfigError(
                f"checkpoint entry {name!r} has shape {tuple(dims)}, network expects {target.shape}"
            )
        target[...] = values.astype(target.dtype)
        seen.add(name)
    expected = {name for name, _ in store.state_entries()}
    missing = expected - seen
    if missing:
        raise ConfigError(f"checkpoint is missing entries: {sorted(missing)[:5]}")
