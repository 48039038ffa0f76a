"""Shared types, store configuration, budget arithmetic and the KV-cache size model."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

U64_MAX = 2**64 - 1
RATIO_TOL = 1e-9
# floor() guard so that e.g. 100 * 0.29 = 28.999999999999996 floors to 29
_FLOOR_EPS = 1e-9


class SketchKVError(Exception):
    """Base class for library errors."""


class ConfigError(SketchKVError, ValueError):
    pass


class SketchError(SketchKVError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class StoreError(SketchKVError, ValueError):
    pass


class InvariantError(SketchKVError, AssertionError):
    """A structural invariant of a store was found broken."""


@dataclass(eq=False)
class TokenRecord:
    """One token: global position, key/value embeddings and cumulative attention score."""

    index: int
    key: np.ndarray
    value: np.ndarray
    score: float = 0.0

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"token index must be non-negative, got {self.index}")
        if self.key.shape != self.value.shape or self.key.ndim != 1:
            raise ValueError("key and value must be 1-d vectors of identical length")
        if self.score < 0:
            raise ValueError(f"token score must be non-negative, got {self.score}")


@dataclass(frozen=True)
class StoreConfig:
    d: int = 128
    total_budget: int = 256
    recent_ratio: float = 0.45
    candidate_ratio: float = 0.45
    vague_ratio: float = 0.1
    # None -> a quarter of the recent budget, at least 1
    slack: Optional[int] = None
    replace_rate: float = 1.1
    r: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d <= 0:
            raise ConfigError(f"d must be positive, got {self.d}")
        if self.total_budget <= 0:
            raise ConfigError(f"total_budget must be positive, got {self.total_budget}")
        for name in ("recent_ratio", "candidate_ratio", "vague_ratio"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        total = self.recent_ratio + self.candidate_ratio + self.vague_ratio
        if abs(total - 1.0) > RATIO_TOL:
            raise ConfigError(f"part ratios must sum to 1, got {total!r}")
        if self.slack is not None and self.slack < 0:
            raise ConfigError(f"slack must be non-negative, got {self.slack}")
        if self.replace_rate < 1.0:
            raise ConfigError(f"replace_rate must be >= 1, got {self.replace_rate}")
        if self.r <= 0 or self.r % 2 == 0:
            raise ConfigError(f"r must be an odd positive integer, got {self.r}")
        if not 0 <= self.seed <= U64_MAX:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def resolved(self) -> "StoreConfig":
        """Copy with the derived slack filled in."""
        if self.slack is not None:
            return self
        return replace(self, slack=default_slack(allocate_budgets(self).recent_budget))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StoreConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown StoreConfig fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StoreConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "StoreConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class BudgetAllocation:
    recent_budget: int
    candidate_budget: int
    vague_slots: int
    b: int

    @property
    def total(self) -> int:
        return self.recent_budget + self.candidate_budget + self.vague_slots


def default_slack(recent_budget: int) -> int:
    return max(1, recent_budget // 4)


def _floor(x: float) -> int:
    return math.floor(x + _FLOOR_EPS)


def allocate_budgets(config: StoreConfig) -> BudgetAllocation:
    """Split ``total_budget`` into Recent / Candidate token slots and an r x b sketch.

    Every part is floored; whatever the flooring leaves over goes to Candidate.
    """
    total = config.total_budget
    if total < 3 * config.r:
        raise ConfigError(
            f"vague part empty: total_budget {total} is below 3*r = {3 * config.r}"
        )
    recent = _floor(total * config.recent_ratio)
    candidate = _floor(total * config.candidate_ratio)
    b = _floor(total * config.vague_ratio / config.r)
    if b == 0:
        raise ConfigError("vague part empty: bucket length floors to 0")
    slots = config.r * b
    candidate += total - recent - candidate - slots
    return BudgetAllocation(recent, candidate, slots, b)


def cache_size(
    num_layers: int,
    num_kv_heads: int,
    num_tokens: int,
    head_dim: int,
    bytes_per_element: int,
) -> int:
    """Bytes held by a full KV cache: keys and values for every layer, head and token."""
    args = dict(
        num_layers=num_layers,
        num_kv_heads=num_kv_heads,
        num_tokens=num_tokens,
        head_dim=head_dim,
        bytes_per_element=bytes_per_element,
    )
    for name, v in args.items():
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise TypeError(f"{name} must be an integer, got {type(v).__name__}")
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    size = 2 * num_layers * num_kv_heads * num_tokens * head_dim * bytes_per_element
    if size > U64_MAX:
        raise OverflowError(f"cache size {size} does not fit in 64 unsigned bits")
    return int(size)


def human_bytes(n: int) -> str:
    """Binary-unit rendering, e.g. 1073741824 -> '1.00 GiB'."""
    units = ["B", "KiB", "MiB", "GiB", "TiB", "PiB", "EiB"]
    value = float(n)
    for unit in units:
        if value < 1024 or unit == units[-1]:
            return f"{int(value)} B" if unit == "B" else f"{value:.2f} {unit}"
        value /= 1024
    raise AssertionError("unreachable")
