"""Vague part: a Count-Sketch whose counters are key/value embedding pairs.

Each token index is hashed into one slot of each of ``r`` buckets. Keys are
accumulated as-is, values are accumulated with a per-(bucket, index) random
sign so that collision noise on values is zero-mean. A query takes the
coordinate-wise median of the ``r`` slot estimates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import SketchError, StoreConfig, TokenRecord, U64_MAX, allocate_budgets

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_LOW63 = np.uint64(0x7FFFFFFFFFFFFFFF)

HEADER = struct.Struct("<IIIQQ")  # r, b, d, seed, a
REGISTRY_DTYPE = np.dtype([("index", "<u8"), ("score", "<f4")])


def splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class HashFamily:
    """``r`` independent (slot, sign) hash pairs over token indices.

    Row ``i`` mixes the token index with its own sub-seed; the slot is taken
    from the low 63 bits of the mix and the sign from bit 63.
    """

    seed: int
    r: int
    b: int

    def __post_init__(self) -> None:
        if not 0 <= self.seed <= U64_MAX:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.r <= 0 or self.r % 2 == 0:
            raise ValueError(f"r must be odd and positive, got {self.r}")
        if self.b <= 0:
            raise ValueError(f"b must be positive, got {self.b}")

    def row_seeds(self) -> np.ndarray:
        rows = np.arange(1, self.r + 1, dtype=np.uint64)
        return splitmix64(np.uint64(self.seed) ^ splitmix64(rows))

    def _mix(self, indices: np.ndarray) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.uint64).reshape(1, -1)
        return splitmix64(self.row_seeds()[:, None] ^ splitmix64(idx))

    def slots(self, indices) -> np.ndarray:
        """(r, n) array of bucket positions in ``[0, b)``."""
        return ((self._mix(indices) & _LOW63) % np.uint64(self.b)).astype(np.intp)

    def signs(self, indices) -> np.ndarray:
        """(r, n) array of +1/-1."""
        top = self._mix(indices) >> np.uint64(63)
        return 1.0 - 2.0 * top.astype(np.float64)


class VagueSketch:
    def __init__(self, r: int, b: int, d: int, seed: int = 0):
        self.hashes = HashFamily(seed=seed, r=r, b=b)
        self.d = d
        self.keys = np.zeros((r, b, d), dtype=np.float32)
        self.values = np.zeros((r, b, d), dtype=np.float32)
        self._scores: dict[int, float] = {}

    @classmethod
    def from_config(cls, config: StoreConfig) -> "VagueSketch":
        alloc = allocate_budgets(config)
        return cls(r=config.r, b=alloc.b, d=config.d, seed=config.seed)

    @property
    def r(self) -> int:
        return self.hashes.r

    @property
    def b(self) -> int:
        return self.hashes.b

    @property
    def seed(self) -> int:
        return self.hashes.seed

    @property
    def num_slots(self) -> int:
        return self.r * self.b

    @property
    def a(self) -> int:
        """Number of live token indices held by the sketch."""
        return len(self._scores)

    def __len__(self) -> int:
        return len(self._scores)

    def __contains__(self, index: int) -> bool:
        return int(index) in self._scores

    def contains(self, index: int) -> bool:
        return int(index) in self._scores

    def indices(self) -> list[int]:
        return sorted(self._scores)

    def score(self, index: int) -> float:
        try:
            return self._scores[int(index)]
        except KeyError:
            raise SketchError(f"token {index} not in vague") from None

    def scores(self) -> dict[int, float]:
        return dict(self._scores)

    def insert(self, tokens: TokenRecord | Iterable[TokenRecord]) -> None:
        if isinstance(tokens, TokenRecord):
            tokens = [tokens]
        tokens = list(tokens)
        if not tokens:
            return
        indices = [t.index for t in tokens]
        self.insert_arrays(
            np.array(indices, dtype=np.int64),
            np.stack([t.key for t in tokens]),
            np.stack([t.value for t in tokens]),
            [t.score for t in tokens],
        )

    def insert_arrays(self, indices, keys, values, scores: Sequence[float]) -> None:
        """Bulk insert. Equivalent to inserting the rows one at a time in order."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        keys = np.asarray(keys, dtype=np.float32).reshape(len(indices), -1)
        values = np.asarray(values, dtype=np.float32).reshape(len(indices), -1)
        if keys.shape[1] != self.d or values.shape[1] != self.d:
            raise ValueError(
                f"dimension mismatch: sketch holds d={self.d}, got {keys.shape[1]}/{values.shape[1]}"
            )
        if len(scores) != len(indices):
            raise ValueError("one score per token required")
        seen = set(self._scores)
        for j in indices.tolist():
            if j < 0:
                raise ValueError(f"token index must be non-negative, got {j}")
            if j in seen:
                raise SketchError(f"token {j} already in vague")
            seen.add(j)
        pos = self.hashes.slots(indices)
        sgn = self.hashes.signs(indices).astype(np.float32)
        rows = np.broadcast_to(np.arange(self.r)[:, None], pos.shape)
        np.add.at(self.keys, (rows, pos), np.broadcast_to(keys, (self.r, *keys.shape)))
        np.add.at(self.values, (rows, pos), values[None, :, :] * sgn[:, :, None])
        for j, s in zip(indices.tolist(), scores):
            if s < 0:
                raise ValueError(f"score must be non-negative, got {s}")
            self._scores[j] = float(s)

    def _estimates(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos = self.hashes.slots(indices)
        sgn = self.hashes.signs(indices).astype(np.float32)
        rows = np.arange(self.r)[:, None]
        k = self.keys[rows, pos]  # (r, n, d)
        v = self.values[rows, pos] * sgn[:, :, None]
        return k, v

    def query_batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Median estimates for several indices; returns (n, d) key and value arrays."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        for j in indices.tolist():
            if j not in self._scores:
                raise SketchError(f"token {j} not in vague")
        if len(indices) == 0:
            empty = np.zeros((0, self.d), dtype=np.float32)
            return empty, empty.copy()
        k, v = self._estimates(indices)
        mid = self.r // 2
        return (
            np.partition(k, mid, axis=0)[mid],
            np.partition(v, mid, axis=0)[mid],
        )

    def query(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        k, v = self.query_batch([index])
        return k[0], v[0]

    def delete(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Remove ``index`` by subtracting its current estimate from its r slots.

        Exact when the token has no collisions; otherwise the slots keep a
        residual equal to the estimate error. Returns the estimate.
        """
        key, value = self.query(index)
        idx = np.array([index], dtype=np.int64)
        pos = self.hashes.slots(idx)[:, 0]
        sgn = self.hashes.signs(idx)[:, 0].astype(np.float32)
        rows = np.arange(self.r)
        self.keys[rows, pos] -= key
        self.values[rows, pos] -= value[None, :] * sgn[:, None]
        del self._scores[int(index)]
        return key, value

    def max_score_index(self) -> int:
        if not self._scores:
            raise SketchError("vague empty")
        # highest score, smaller index on ties
        return min(self._scores.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    def max_score(self) -> float:
        return self._scores[self.max_score_index()]

    def update_score(self, index: int, delta: float) -> None:
        if delta < 0:
            raise ValueError(f"score delta must be non-negative, got {delta}")
        j = int(index)
        if j not in self._scores:
            raise SketchError(f"token {j} not in vague")
        self._scores[j] += float(delta)

    def state_equal(self, other: "VagueSketch") -> bool:
        return (
            self.hashes == other.hashes
            and self.d == other.d
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and self._scores == other._scores
        )

    def to_bytes(self) -> bytes:
        """Flat little-endian layout: header, r*b slots (key_sum then value_sum), registry."""
        header = HEADER.pack(self.r, self.b, self.d, self.seed, self.a)
        slots = np.stack([self.keys, self.values], axis=2).astype("<f4", copy=False)
        reg = np.array(
            sorted(self._scores.items()), dtype=REGISTRY_DTYPE
        ).reshape(-1)
        return header + slots.tobytes(order="C") + reg.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "VagueSketch":
        if len(blob) < HEADER.size:
            raise ValueError("truncated sketch blob")
        r, b, d, seed, a = HEADER.unpack_from(blob, 0)
        n_slot_bytes = r * b * 2 * d * 4
        expected = HEADER.size + n_slot_bytes + a * REGISTRY_DTYPE.itemsize
        if len(blob) != expected:
            raise ValueError(f"sketch blob has {len(blob)} bytes, expected {expected}")
        sketch = cls(r=r, b=b, d=d, seed=seed)
        slots = np.frombuffer(blob, dtype="<f4", count=r * b * 2 * d, offset=HEADER.size)
        slots = slots.reshape(r, b, 2, d)
        sketch.keys = slots[:, :, 0, :].astype(np.float32)
        sketch.values = slots[:, :, 1, :].astype(np.float32)
        reg = np.frombuffer(blob, dtype=REGISTRY_DTYPE, count=a, offset=HEADER.size + n_slot_bytes)
        sketch._scores = {int(i): float(s) for i, s in zip(reg["index"], reg["score"])}
        return sketch

    def __repr__(self) -> str:
        return f"VagueSketch(r={self.r}, b={self.b}, d={self.d}, seed={self.seed}, a={self.a})"
