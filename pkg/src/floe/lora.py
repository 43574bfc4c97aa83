"""Low-rank adapters: forward pass, rank-r compression, size model, file format.

An adapter holds ``a`` (r x k) and ``b`` (d x r); the weight update it
represents is ``b @ a`` but the forward pass never forms that product.

File format (``.flra``), little-endian::

    magic   4s   b"FLOE"
    version u16
    d       u32
    k       u32
    r       u32
    layer   u32
    A       r*k float32, row-major
    B       d*r float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, RankOutOfRange, ShapeMismatch
from .numerics import as_matrix, as_vector, truncated_svd

MAGIC = b"FLOE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")
BYTES_PER_PARAM = 4


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    a: np.ndarray
    b: np.ndarray
    layer_id: int = 0
    task_tag: str | None = field(default=None)

    def __post_init__(self):
        a = _frozen(self.a)
        b = _frozen(self.b)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeMismatch("adapter factors must be 2-d")
        if a.shape[0] != b.shape[1]:
            raise ShapeMismatch(f"A has {a.shape[0]} rows but B has {b.shape[1]} columns")
        if a.shape[0] > min(b.shape[0], a.shape[1]):
            raise RankOutOfRange(f"rank {a.shape[0]} exceeds min(d, k) for {b.shape[0]}x{a.shape[1]}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("adapter has non-finite entries")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[0]

    @property
    def k(self) -> int:
        return self.a.shape[1]

    def delta_w(self) -> np.ndarray:
        return self.b @ self.a

    def scaled(self, factor: float) -> "LoraAdapter":
        return LoraAdapter(self.a * factor, self.b, self.layer_id, self.task_tag)

    def with_tag(self, tag: str | None) -> "LoraAdapter":
        return LoraAdapter(self.a, self.b, self.layer_id, tag)

    def same_values(self, other: "LoraAdapter") -> bool:
        return (
            self.layer_id == other.layer_id
            and self.a.shape == other.a.shape
            and self.b.shape == other.b.shape
            and self.a.tobytes() == other.a.tobytes()
            and self.b.tobytes() == other.b.tobytes()
        )


def create(d: int, k: int, rank: int, rng: np.random.Generator, layer_id: int = 0,
           task_tag: str | None = None) -> LoraAdapter:
    """Fresh adapter: A ~ U(-1/sqrt(k), 1/sqrt(k)), B = 0."""
    if rank < 0 or rank > min(d, k):
        raise RankOutOfRange(f"rank {rank} outside [0, {min(d, k)}]")
    bound = 1.0 / np.sqrt(k)
    a = rng.uniform(-bound, bound, size=(rank, k))
    return LoraAdapter(a, np.zeros((d, rank)), layer_id, task_tag)


def empty(d: int, k: int, layer_id: int = 0) -> LoraAdapter:
    """Rank-0 adapter; contributes nothing."""
    return LoraAdapter(np.zeros((0, k)), np.zeros((d, 0)), layer_id)


def forward(w, x, adapter: LoraAdapter) -> np.ndarray:
    """``W x + B (A x)``."""
    w = as_matrix(w)
    x = as_vector(x)
    if w.shape != (adapter.d, adapter.k):
        raise ShapeMismatch(f"W is {w.shape}, adapter expects {(adapter.d, adapter.k)}")
    if x.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"x has length {x.shape[0]}, W has {w.shape[1]} columns")
    return w @ x + adapter.b @ (adapter.a @ x)


class Compressed(NamedTuple):
    b: np.ndarray
    a: np.ndarray
    achieved_delta: float

    def reconstruct(self) -> np.ndarray:
        return self.b @ self.a

    def to_adapter(self, layer_id: int = 0, task_tag: str | None = None) -> LoraAdapter:
        return LoraAdapter(self.a, self.b, layer_id, task_tag)


def compress(g, r: int) -> Compressed:
    """Rank-r truncation ``Q_r(g)`` returned in factored form.

    ``achieved_delta`` is the retained share of squared Frobenius mass,
    computed from the kept singular values, so that
    ``||g - Q_r(g)||^2 = (1 - achieved_delta) ||g||^2``.
    """
    g = as_matrix(g)
    res = truncated_svd(g, r)
    total = float(np.sum(g * g))
    if total == 0.0:
        delta = 1.0
    else:
        delta = float(np.sum(res.s**2)) / total
        delta = min(1.0, max(0.0, delta))
    return Compressed(b=res.u * res.s, a=res.v.T.copy(), achieved_delta=delta)


def refactor(delta_w, rank: int, layer_id: int = 0, task_tag: str | None = None) -> LoraAdapter:
    """Adapter whose product is the rank-``rank`` truncation of ``delta_w``."""
    delta_w = as_matrix(delta_w)
    if rank == 0:
        return empty(*delta_w.shape, layer_id=layer_id)
    return compress(delta_w, rank).to_adapter(layer_id, task_tag)


@dataclass(frozen=True)
class SizeReport:
    params: int
    bytes: int
    ratio_vs_full: float


def size_report(d: int, k: int, rank: int) -> SizeReport:
    if d <= 0 or k <= 0:
        raise ValueError("dimensions must be positive")
    if rank < 0:
        raise RankOutOfRange("rank must be non-negative")
    params = rank * (d + k)
    return SizeReport(params=params, bytes=params * BYTES_PER_PARAM, ratio_vs_full=params / (d * k))


# --- serialization ----------------------------------------------------------


def to_bytes(adapter: LoraAdapter) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, adapter.d, adapter.k, adapter.rank, adapter.layer_id)
    return header + adapter.a.astype("<f4").tobytes() + adapter.b.astype("<f4").tobytes()


def from_bytes(data: bytes, task_tag: str | None = None) -> LoraAdapter:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, d, k, r, layer = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    n_a, n_b = r * k, d * r
    expected = _HEADER.size + 4 * (n_a + n_b)
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, got {len(data)}")
    off = _HEADER.size
    a = np.frombuffer(data, dtype="<f4", count=n_a, offset=off).reshape(r, k)
    b = np.frombuffer(data, dtype="<f4", count=n_b, offset=off + 4 * n_a).reshape(d, r)
    return LoraAdapter(a.astype(np.float64), b.astype(np.float64), layer, task_tag)


def save(adapter: LoraAdapter, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(adapter))
    return path


def load(path: str | Path, task_tag: str | None = None) -> LoraAdapter:
    return from_bytes(Path(path).read_bytes(), task_tag)
