"""Three-tier token store: Recent queue, Candidate min-heap and the Vague sketch."""

from __future__ import annotations

import base64
import heapq
import json
from collections import deque
from enum import Enum
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import (
    InvariantError,
    StoreConfig,
    StoreError,
    TokenRecord,
    allocate_budgets,
)
from .sketch import VagueSketch


class Part(str, Enum):
    RECENT = "recent"
    CANDIDATE = "candidate"
    VAGUE = "vague"


class RecentQueue:
    """FIFO of the newest tokens, oldest first."""

    def __init__(self, budget: int, slack: int):
        self.budget = budget
        self.slack = slack
        self._entries: deque[TokenRecord] = deque()
        self._by_index: dict[int, TokenRecord] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, index: int) -> bool:
        return index in self._by_index

    def __iter__(self) -> Iterator[TokenRecord]:
        return iter(self._entries)

    def push(self, tokens: Iterable[TokenRecord]) -> None:
        for t in tokens:
            self._entries.append(t)
            self._by_index[t.index] = t

    def pop_oldest(self, k: int) -> list[TokenRecord]:
        out = []
        for _ in range(k):
            t = self._entries.popleft()
            del self._by_index[t.index]
            out.append(t)
        return out

    def get(self, index: int) -> TokenRecord:
        return self._by_index[index]


class CandidateHeap:
    """Min-heap of exact tokens keyed by (score, index)."""

    def __init__(self, budget: int):
        self.budget = budget
        self._heap: list[tuple[float, int]] = []
        self._by_index: dict[int, TokenRecord] = {}

    def __len__(self) -> int:
        return len(self._heap)

    def __contains__(self, index: int) -> bool:
        return index in self._by_index

    def __iter__(self) -> Iterator[TokenRecord]:
        return iter(self._by_index.values())

    def push(self, token: TokenRecord) -> None:
        heapq.heappush(self._heap, (token.score, token.index))
        self._by_index[token.index] = token

    def pop_min(self) -> TokenRecord:
        _, index = heapq.heappop(self._heap)
        return self._by_index.pop(index)

    def min_score(self) -> float:
        return self._heap[0][0]

    def get(self, index: int) -> TokenRecord:
        return self._by_index[index]

    def rekey(self) -> None:
        self._heap = [(t.score, t.index) for t in self._by_index.values()]
        heapq.heapify(self._heap)


class TieredStore:
    """Per-layer compression unit.

    Tokens enter Recent, age out in bulk into Candidate, and Candidate's
    lowest-score tokens are compressed into the Vague sketch. High-score
    tokens in Vague are swapped back into Candidate once their score beats
    Candidate's minimum by ``replace_rate``.
    """

    def __init__(self, config: StoreConfig):
        self.config = config.resolved()
        self.allocation = allocate_budgets(self.config)
        self.recent = RecentQueue(self.allocation.recent_budget, self.config.slack)
        self.candidate = CandidateHeap(self.allocation.candidate_budget)
        self.vague = VagueSketch(
            r=self.config.r, b=self.allocation.b, d=self.config.d, seed=self.config.seed
        )
        self.next_index = 0
        self.swaps = 0
        # tokens whose exact-tier record is a sketch estimate (swapped back from Vague)
        self.approximate: set[int] = set()

    @property
    def swap_cap(self) -> int:
        return self.candidate.budget + 1

    @property
    def memory_ceiling(self) -> int:
        """Token-equivalents of embedding storage the store may ever hold."""
        return (
            self.recent.budget + self.recent.slack + self.candidate.budget + self.vague.num_slots
        )

    def resident_tokens(self) -> int:
        """Token-equivalents of embedding storage currently held."""
        return len(self.recent) + len(self.candidate) + self.vague.num_slots

    def compress(self, new_tokens: TokenRecord | Sequence[TokenRecord]) -> None:
        if isinstance(new_tokens, TokenRecord):
            new_tokens = [new_tokens]
        new_tokens = list(new_tokens)
        for offset, t in enumerate(new_tokens):
            if t.index != self.next_index + offset:
                raise StoreError(
                    f"expected token index {self.next_index + offset}, got {t.index}"
                )
            if t.key.shape != (self.config.d,):
                raise StoreError(f"token {t.index} has shape {t.key.shape}, expected ({self.config.d},)")
        self.next_index += len(new_tokens)

        self.recent.push(new_tokens)
        if len(self.recent) > self.recent.budget + self.recent.slack:
            for t in self.recent.pop_oldest(len(self.recent) - self.recent.budget):
                self.candidate.push(t)

        spill = []
        while len(self.candidate) > self.candidate.budget:
            spill.append(self.candidate.pop_min())
        self.vague.insert(spill)

        iterations = 0
        while (
            len(self.candidate) > 0
            and len(self.vague) > 0
            and self.candidate.min_score() * self.config.replace_rate < self.vague.max_score()
        ):
            iterations += 1
            if iterations > self.swap_cap:
                raise StoreError(
                    f"swap divergence: more than {self.swap_cap} swaps in one compress"
                )
            index = self.vague.max_score_index()
            score = self.vague.score(index)
            key, value = self.vague.delete(index)
            self.vague.insert(self.candidate.pop_min())
            self.candidate.push(TokenRecord(index, key, value, score))
            self.approximate.add(index)
            self.swaps += 1

    def update_scores(self, attention_rows) -> np.ndarray:
        """Accumulate post-softmax attention mass; returns the per-token increments."""
        rows = np.atleast_2d(np.asarray(attention_rows, dtype=np.float64))
        if rows.shape[1] != self.next_index:
            raise StoreError(
                f"attention rows cover {rows.shape[1]} tokens, store holds {self.next_index}"
            )
        if np.any(rows < 0) or not np.all(np.isfinite(rows)):
            raise StoreError("attention scores must be finite and non-negative")
        sums = rows.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            raise StoreError(f"attention rows must sum to 1, got {sums.tolist()}")
        increments = rows.sum(axis=0)
        self.add_scores(increments)
        return increments

    def add_scores(self, increments) -> None:
        increments = np.asarray(increments, dtype=np.float64)
        if increments.shape != (self.next_index,):
            raise StoreError("one score increment per stored token required")
        if np.any(increments < 0):
            raise StoreError("score increments must be non-negative")
        for t in self.recent:
            t.score += float(increments[t.index])
        for t in self.candidate:
            t.score += float(increments[t.index])
        self.candidate.rekey()
        for j in self.vague.indices():
            self.vague.update_score(j, float(increments[j]))

    def membership(self, index: int) -> Part:
        if not 0 <= index < self.next_index:
            raise IndexError(f"token index {index} out of range [0, {self.next_index})")
        if index in self.vague:
            return Part.VAGUE
        if index in self.recent:
            return Part.RECENT
        if index in self.candidate:
            return Part.CANDIDATE
        raise InvariantError(f"token {index} is in no part")

    def score(self, index: int) -> float:
        part = self.membership(index)
        if part is Part.VAGUE:
            return self.vague.score(index)
        if part is Part.RECENT:
            return self.recent.get(index).score
        return self.candidate.get(index).score

    def revive(self) -> tuple[np.ndarray, np.ndarray]:
        """Rebuild the full (next_index, d) key and value caches."""
        n, d = self.next_index, self.config.d
        keys = np.zeros((n, d), dtype=np.float32)
        values = np.zeros((n, d), dtype=np.float32)
        filled = np.zeros(n, dtype=bool)
        vague_idx = self.vague.indices()
        if vague_idx:
            keys[vague_idx], values[vague_idx] = self.vague.query_batch(vague_idx)
            filled[vague_idx] = True
        for part in (self.recent, self.candidate):
            for t in part:
                if filled[t.index]:
                    raise InvariantError(f"token {t.index} present in two parts")
                keys[t.index] = t.key
                values[t.index] = t.value
                filled[t.index] = True
        if not filled.all():
            raise InvariantError(f"tokens missing from every part: {np.flatnonzero(~filled)[:10].tolist()}")
        return keys, values

    def check_invariants(self, swap: bool = True) -> None:
        recent = [t.index for t in self.recent]
        candidate = [t.index for t in self.candidate]
        vague = self.vague.indices()
        everything = recent + candidate + vague
        if len(everything) != len(set(everything)):
            raise InvariantError("a token index appears in more than one part")
        if set(everything) != set(range(self.next_index)):
            raise InvariantError("parts do not partition the token range")
        if recent != sorted(recent):
            raise InvariantError("recent queue out of index order")
        if len(self.recent) > self.recent.budget + self.recent.slack:
            raise InvariantError("recent queue over budget + slack")
        if len(self.candidate) > self.candidate.budget:
            raise InvariantError("candidate heap over budget")
        if self.resident_tokens() > self.memory_ceiling:
            raise InvariantError("resident embedding storage above ceiling")
        if (
            swap
            and len(self.candidate)
            and len(self.vague)
            and self.candidate.min_score() * self.config.replace_rate < self.vague.max_score()
        ):
            raise InvariantError("swap condition still holds after compress")

    def to_dict(self) -> dict:
        def tokens(part) -> list[dict]:
            return [
                {
                    "index": t.index,
                    "score": t.score,
                    "key": np.asarray(t.key).tolist(),
                    "value": np.asarray(t.value).tolist(),
                }
                for t in sorted(part, key=lambda t: t.index)
            ]

        return {
            "config": self.config.to_dict(),
            "next_index": self.next_index,
            "recent": tokens(self.recent),
            "candidate": tokens(self.candidate),
            "vague": base64.b64encode(self.vague.to_bytes()).decode("ascii"),
            "approximate": sorted(self.approximate),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TieredStore":
        store = cls(StoreConfig.from_dict(data["config"]))
        store.next_index = int(data["next_index"])

        def record(row: dict) -> TokenRecord:
            return TokenRecord(
                int(row["index"]),
                np.asarray(row["key"], dtype=np.float32),
                np.asarray(row["value"], dtype=np.float32),
                float(row["score"]),
            )

        store.recent.push(record(row) for row in data["recent"])
        for row in data["candidate"]:
            store.candidate.push(record(row))
        store.vague = VagueSketch.from_bytes(base64.b64decode(data["vague"]))
        store.approximate = set(data.get("approximate", []))
        # registry scores went through float32, so the swap condition may not be exact
        store.check_invariants(swap=False)
        return store

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TieredStore":
        return cls.from_dict(json.loads(text))
