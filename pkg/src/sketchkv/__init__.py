"""Reversible sketch-based KV-cache compression with three-tier token storage."""

from .core import (
    BudgetAllocation,
    ConfigError,
    InvariantError,
    SketchKVError,
    SketchError,
    StoreConfig,
    StoreError,
    TokenRecord,
    allocate_budgets,
    cache_size,
)
from .sketch import HashFamily, VagueSketch
from .store import CandidateHeap, Part, RecentQueue, TieredStore
from .sim import AttentionTrace, ErrorReport, SimConfig, full_attention, generate_stream, run_comparison

__all__ = [
    "AttentionTrace",
    "BudgetAllocation",
    "CandidateHeap",
    "ConfigError",
    "ErrorReport",
    "HashFamily",
    "InvariantError",
    "SketchKVError",
    "Part",
    "RecentQueue",
    "SimConfig",
    "SketchError",
    "StoreConfig",
    "StoreError",
    "TieredStore",
    "TokenRecord",
    "VagueSketch",
    "allocate_budgets",
    "cache_size",
    "full_attention",
    "generate_stream",
    "run_comparison",
]

__version__ = "0.1.0"
