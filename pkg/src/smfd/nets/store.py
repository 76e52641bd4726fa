"""Weight stores: initialization, parameter counting and the binary container.

Container layout (little-endian)::

    b"SMFDW1"
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 extents,
                row-major float32 data
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from ..rng import Stream
from .graph import NetworkGraph

MAGIC = b"SMFDW1"


class WeightFileError(ValueError):
    pass


class ParamCount(NamedTuple):
    total: int
    trainable: int
    non_trainable: int


def param_count(graph: NetworkGraph) -> ParamCount:
    """Count parameter elements by walking the graph's nodes.

    Shared parameters are counted once.
    """
    seen = set()
    trainable = frozen = 0
    for node in graph.nodes:
        for name in node.weight_names():
            if name in seen:
                continue
            seen.add(name)
            spec = graph.params[name]
            n = int(np.prod(spec.shape, dtype=np.int64))
            if spec.trainable:
                trainable += n
            else:
                frozen += n
    return ParamCount(trainable + frozen, trainable, frozen)


def init_weights(graph: NetworkGraph, seed: int = 0, zeros: bool = False) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero biases, unit BN scale; deterministic in ``seed``."""
    rs = Stream(seed)
    out = {}
    for name in sorted(graph.params):
        spec = graph.params[name]
        if zeros:
            out[name] = np.zeros(spec.shape, dtype=np.float32)
            if spec.init == "ones" and not spec.trainable:
                out[name] = np.ones(spec.shape, dtype=np.float32)
            continue
        if spec.init == "zeros":
            arr = np.zeros(spec.shape)
        elif spec.init == "ones":
            arr = np.ones(spec.shape)
        else:
            limit = np.sqrt(6.0 / sum(spec.fan))
            n = int(np.prod(spec.shape))
            arr = (rs.uniform(n) * 2 - 1).reshape(spec.shape) * limit
        out[name] = arr.astype(np.float32)
    return out


def save_weights(store: Mapping[str, np.ndarray], path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<I", len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        if len(raw) > 0xFFFF or a.ndim > 255:
            raise WeightFileError(f"cannot encode tensor {name!r}")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise WeightFileError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"{path}: truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    store: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"{path}: tensor name is not UTF-8") from exc
        if name in store:
            raise WeightFileError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        store[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes")
    return store
