"""Synthetic decode harness: full attention and store-compressed attention side by side."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import bounds
from .core import ConfigError, StoreConfig, TokenRecord, U64_MAX
from .store import Part, TieredStore

# Var(dp_i) is tracked for tokens whose full-cache probability lies in this range
DP_RANGE = (0.01, 0.5)
DP_EDGES = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)

_STORE_FIELDS = {f.name for f in fields(StoreConfig)}


@dataclass(frozen=True)
class SimConfig:
    n_tokens: int = 512
    d_k: int = 128
    sigma_q: float = 1.0
    sigma_k: float = 1.0
    sigma_v: float = 1.0
    seed: int = 0
    store: StoreConfig = field(default_factory=StoreConfig)
    planted_heavy: tuple[tuple[int, float], ...] = ()
    # when set, overrides store.total_budget with round(fraction * n_tokens)
    budget_fraction: Optional[float] = None

    def __post_init__(self) -> None:
        if self.n_tokens < 1:
            raise ConfigError(f"n_tokens must be >= 1, got {self.n_tokens}")
        if self.d_k < 1:
            raise ConfigError(f"d_k must be >= 1, got {self.d_k}")
        for name in ("sigma_q", "sigma_k", "sigma_v"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.seed <= U64_MAX:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if self.store.d != self.d_k:
            raise ConfigError(f"store.d ({self.store.d}) must equal d_k ({self.d_k})")
        planted = tuple((int(i), float(s)) for i, s in self.planted_heavy)
        for i, s in planted:
            if not 0 <= i < self.n_tokens or s < 0:
                raise ConfigError(f"bad planted_heavy entry ({i}, {s})")
        object.__setattr__(self, "planted_heavy", planted)
        # one seed drives both the stream and the sketch's hash family
        if self.store.seed != self.seed:
            object.__setattr__(self, "store", replace(self.store, seed=self.seed))
        if self.budget_fraction is not None:
            if not 0 < self.budget_fraction:
                raise ConfigError("budget_fraction must be positive")
            total = max(1, round(self.budget_fraction * self.n_tokens))
            object.__setattr__(self, "store", replace(self.store, total_budget=total))

    def store_config(self) -> StoreConfig:
        return self.store.resolved()

    def to_dict(self) -> dict[str, Any]:
        """Flat JSON form with every default materialised."""
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "store"}
        out["planted_heavy"] = [list(p) for p in self.planted_heavy]
        out.update(self.store_config().to_dict())
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimConfig":
        sim_fields = {f.name for f in fields(cls)} - {"store"}
        unknown = set(data) - sim_fields - _STORE_FIELDS
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        sim_kw = {k: v for k, v in data.items() if k in sim_fields}
        store_kw = {k: v for k, v in data.items() if k in _STORE_FIELDS}
        store_kw.setdefault("d", sim_kw.get("d_k", 128))
        if "planted_heavy" in sim_kw:
            sim_kw["planted_heavy"] = tuple(tuple(p) for p in sim_kw["planted_heavy"])
        try:
            return cls(store=StoreConfig.from_dict(store_kw), **sim_kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


def generate_stream(config: SimConfig) -> list[tuple[np.ndarray, TokenRecord]]:
    """Deterministic i.i.d. normal (query, token) pairs; planted boosts become initial scores."""
    rng = np.random.default_rng(config.seed)
    shape = (config.n_tokens, config.d_k)
    q = (rng.standard_normal(shape) * config.sigma_q).astype(np.float32)
    k = (rng.standard_normal(shape) * config.sigma_k).astype(np.float32)
    v = (rng.standard_normal(shape) * config.sigma_v).astype(np.float32)
    prior = dict(config.planted_heavy)
    return [
        (q[t], TokenRecord(t, k[t], v[t], prior.get(t, 0.0)))
        for t in range(config.n_tokens)
    ]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attend(q, keys, values, d_k: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """One query over a whole cache; returns (output, probabilities) in float64."""
    keys = np.asarray(keys, dtype=np.float64)
    d_k = d_k or keys.shape[1]
    p = softmax(keys @ np.asarray(q, dtype=np.float64) / math.sqrt(d_k))
    return p @ np.asarray(values, dtype=np.float64), p


def full_attention(queries, keys, values, d_k: Optional[int] = None):
    """Causal attention; query t sees tokens 0..t. Returns outputs (n, d) and p (n, n)."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d_k = d_k or k.shape[1]
    logits = q @ k.T / math.sqrt(d_k)
    n = logits.shape[0]
    logits[np.triu_indices(n, k=1)] = -np.inf
    p = softmax(logits)
    return p @ v, p


@dataclass
class AttentionTrace:
    p_full: np.ndarray
    p_compressed: np.ndarray
    out_full: np.ndarray
    out_compressed: np.ndarray
    vague_indices: np.ndarray
    delta_k: np.ndarray
    delta_v: np.ndarray
    membership: list[Part]
    # revived cache after the last step
    keys: np.ndarray
    values: np.ndarray


@dataclass
class DpBucket:
    lo: float
    hi: float
    count: int = 0
    sum_dp: float = 0.0
    sum_dp2: float = 0.0
    sum_predicted: float = 0.0
    sum_predicted_bound: float = 0.0

    @property
    def var_dp(self) -> float:
        if self.count == 0:
            return float("nan")
        m = self.sum_dp / self.count
        return self.sum_dp2 / self.count - m * m

    @property
    def predicted(self) -> float:
        return self.sum_predicted / self.count if self.count else float("nan")

    @property
    def predicted_bound(self) -> float:
        return self.sum_predicted_bound / self.count if self.count else float("nan")

    def merge(self, other: "DpBucket") -> None:
        self.count += other.count
        self.sum_dp += other.sum_dp
        self.sum_dp2 += other.sum_dp2
        self.sum_predicted += other.sum_predicted
        self.sum_predicted_bound += other.sum_predicted_bound

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out.update(var_dp=self.var_dp, predicted=self.predicted, predicted_bound=self.predicted_bound)
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DpBucket":
        return cls(**{f.name: data[f.name] for f in fields(cls)})


def empty_histogram() -> list[DpBucket]:
    return [DpBucket(lo, hi) for lo, hi in zip(DP_EDGES[:-1], DP_EDGES[1:])]


def merge_histograms(histograms: Sequence[Sequence[DpBucket]]) -> tuple[list[DpBucket], DpBucket]:
    """Pool per-bucket sums across runs; returns (buckets, overall)."""
    merged = empty_histogram()
    for hist in histograms:
        for acc, b in zip(merged, hist):
            acc.merge(b)
    overall = DpBucket(DP_RANGE[0], DP_RANGE[1])
    for b in merged:
        overall.merge(b)
    return merged, overall


@dataclass
class ErrorReport:
    config: dict[str, Any]
    empirical: dict[str, Any]
    predicted: dict[str, Any]
    occupancy: dict[str, int]
    pass_flags: dict[str, bool]
    timestamp: float = field(default_factory=time.time)

    @property
    def passed(self) -> bool:
        return all(self.pass_flags.values())

    def dp_histogram(self) -> list[DpBucket]:
        return [DpBucket.from_dict(b) for b in self.empirical["var_dp"]]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ErrorReport":
        return cls(**data)


def _bin(p: float) -> int:
    return int(np.searchsorted(DP_EDGES, p, side="right")) - 1


def run_comparison(
    config: SimConfig, check_invariants: bool = True
) -> tuple[AttentionTrace, ErrorReport]:
    """Stream tokens one at a time through a store and a full cache, comparing attention.

    Scores are accumulated from the compressed-cache probabilities.
    """
    store = TieredStore(config.store_config())
    stream = generate_stream(config)
    n, d = config.n_tokens, config.d_k
    k_full = np.stack([t.key for _, t in stream])
    v_full = np.stack([t.value for _, t in stream])

    p_full = np.zeros((n, n))
    p_comp = np.zeros((n, n))
    out_full = np.zeros((n, d))
    out_comp = np.zeros((n, d))
    hist = empty_histogram()
    max_resident = 0
    flags = {"rows_normalized": True, "memory_ceiling": True, "lossless_tiers": True}

    for t, (q, token) in enumerate(stream):
        store.compress(token)
        if check_invariants:
            store.check_invariants()
        max_resident = max(max_resident, store.resident_tokens())
        if store.resident_tokens() > store.memory_ceiling:
            flags["memory_ceiling"] = False

        keys, values = store.revive()
        vague = np.array(store.vague.indices(), dtype=np.intp)
        exact = np.ones(t + 1, dtype=bool)
        exact[vague] = False
        exact[list(store.approximate)] = False
        if not (
            np.array_equal(keys[exact], k_full[: t + 1][exact])
            and np.array_equal(values[exact], v_full[: t + 1][exact])
        ):
            flags["lossless_tiers"] = False

        out_full[t], p_full[t, : t + 1] = attend(q, k_full[: t + 1], v_full[: t + 1], d)
        out_comp[t], p_comp[t, : t + 1] = attend(q, keys, values, d)
        if abs(p_comp[t].sum() - 1.0) > 1e-5:
            flags["rows_normalized"] = False
        store.update_scores(p_comp[t, : t + 1])

        if len(vague):
            dk = keys[vague].astype(np.float64) - k_full[vague]
            sigma_emp = np.zeros(t + 1)
            sigma_emp[vague] = math.sqrt(float(np.mean(dk**2)))
            sigma_bnd = np.zeros(t + 1)
            sigma_bnd[vague] = bounds.noise_from_occupancy(
                len(vague), store.vague.num_slots, config.sigma_k, config.sigma_v
            ).sigma_k_new
            pf = p_full[t, : t + 1]
            pred = bounds.attention_perturbation_variances(pf, config.sigma_q, sigma_emp)
            pred_b = bounds.attention_perturbation_variances(pf, config.sigma_q, sigma_bnd)
            dp = p_comp[t, : t + 1] - pf
            for i in np.flatnonzero((pf >= DP_RANGE[0]) & (pf <= DP_RANGE[1])):
                bkt = hist[min(_bin(pf[i]), len(hist) - 1)]
                bkt.count += 1
                bkt.sum_dp += dp[i]
                bkt.sum_dp2 += dp[i] ** 2
                bkt.sum_predicted += pred[i]
                bkt.sum_predicted_bound += pred_b[i]

    vague = np.array(store.vague.indices(), dtype=np.intp)
    keys, values = store.revive()
    delta_k = keys[vague].astype(np.float64) - k_full[vague]
    delta_v = values[vague].astype(np.float64) - v_full[vague]
    a, N = len(vague), store.vague.num_slots
    var_dk = float(np.var(delta_k)) if a else 0.0
    var_dv = float(np.var(delta_v)) if a else 0.0
    dk_bound, exceed = bounds.key_variance_tail(a, N, config.sigma_k)
    dv_bound, _ = bounds.key_variance_tail(a, N, config.sigma_v)
    flags["key_tail_bound"] = var_dk <= dk_bound
    flags["value_tail_bound"] = var_dv <= dv_bound
    _, overall = merge_histograms([hist])

    trace = AttentionTrace(
        p_full, p_comp, out_full, out_comp, vague, delta_k, delta_v,
        [store.membership(i) for i in range(n)], keys, values,
    )
    report = ErrorReport(
        config=config.to_dict(),
        empirical={
            "var_dk": var_dk,
            "var_dv": var_dv,
            "var_dp_overall": overall.var_dp,
            "var_dp": [b.to_dict() for b in hist],
            "max_abs_dp": float(np.max(np.abs(p_comp - p_full))),
            "max_abs_dout": float(np.max(np.abs(out_comp - out_full))),
            "swaps": store.swaps,
        },
        predicted={
            "var_dk_bound": dk_bound,
            "var_dv_bound": dv_bound,
            "exceed_probability": exceed,
            "var_dp_first_order": overall.predicted,
            "var_dp_bound_derived": overall.predicted_bound,
        },
        occupancy={
            "a": a,
            "N": N,
            "r": store.vague.r,
            "b": store.vague.b,
            "recent_budget": store.recent.budget,
            "slack": store.recent.slack,
            "candidate_budget": store.candidate.budget,
            "memory_ceiling": store.memory_ceiling,
            "max_resident": max_resident,
        },
        pass_flags=flags,
    )
    return trace, report
