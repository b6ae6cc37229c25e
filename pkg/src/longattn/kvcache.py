"""Incremental decoding with a per-head KV cache and eviction policies.

Each (layer, head) slot keeps its own entries: key row, value row,
original position and cumulative attention probability. After every
decode step the policy trims each slot independently, so different heads
can keep different tokens.

Keys keep the rotary phase of their original positions; nothing is
re-rotated after eviction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError
from .model import AttnMode, DecoderModel, _check_tokens, block
from .tensor import Tensor

FULL, LOCAL, H2O, SINK = "full", "local", "h2o", "sink"


@dataclass(frozen=True)
class EvictionPolicy:
    """``budget`` caps entries per head; ``recent`` (H2O) / ``num_sink`` (Sink) as named."""

    kind: str = FULL
    budget: int = 0
    recent: int = 0
    num_sink: int = 0

    def __post_init__(self):
        if self.kind not in (FULL, LOCAL, H2O, SINK):
            raise ConfigError(f"unknown eviction policy {self.kind!r}")
        if self.kind == FULL:
            return
        if self.budget < 1:
            raise ConfigError("cache budget must be >= 1")
        if self.kind == H2O and not 0 < self.recent < self.budget:
            raise ConfigError("H2O needs 0 < recent < budget")
        if self.kind == SINK and not 0 <= self.num_sink < self.budget:
            raise ConfigError("sink policy needs 0 <= num_sink < budget")

    @classmethod
    def full(cls) -> "EvictionPolicy":
        return cls(FULL)

    @classmethod
    def local(cls, window: int) -> "EvictionPolicy":
        return cls(LOCAL, budget=window)

    @classmethod
    def h2o(cls, budget: int, recent: int) -> "EvictionPolicy":
        return cls(H2O, budget=budget, recent=recent)

    @classmethod
    def sink(cls, num_sink: int, window: int) -> "EvictionPolicy":
        return cls(SINK, budget=window, num_sink=num_sink)

    def capacity(self) -> Optional[int]:
        return None if self.kind == FULL else self.budget


@dataclass
class HeadCache:
    """Entries of one (layer, head) slot, kept in original-position order."""

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    scores: np.ndarray
    evicted: int = 0
    evicted_mass: float = 0.0

    @classmethod
    def empty(cls, head_dim: int) -> "HeadCache":
        return cls(np.zeros((0, head_dim)), np.zeros((0, head_dim)),
                   np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self) -> int:
        return self.positions.size

    def keep(self, idx: np.ndarray) -> list[int]:
        idx = np.sort(idx)
        drop = np.setdiff1d(np.arange(len(self)), idx)
        gone = self.positions[drop].tolist()
        self.evicted += drop.size
        self.evicted_mass += float(self.scores[drop].sum())
        self.keys, self.values = self.keys[idx], self.values[idx]
        self.positions, self.scores = self.positions[idx], self.scores[idx]
        return gone


def select_keep(positions: np.ndarray, scores: np.ndarray, policy: EvictionPolicy) -> np.ndarray:
    """Indices (into the entry arrays) that survive ``policy``.

    Entries are ordered by original position. H2O keeps the ``recent``
    newest entries, then the highest cumulative scores among the rest; on
    equal scores the earlier position wins.
    """
    n = positions.size
    cap = policy.capacity()
    if cap is None or n <= cap:
        return np.arange(n)
    if policy.kind == LOCAL:
        return np.arange(n - cap, n)
    if policy.kind == SINK:
        sinks = np.nonzero(positions < policy.num_sink)[0]
        rest = np.setdiff1d(np.arange(n), sinks)
        tail = rest[rest.size - (cap - sinks.size):] if cap > sinks.size else rest[:0]
        return np.concatenate([sinks, tail])
    recent = np.arange(n - policy.recent, n)
    older = np.arange(n - policy.recent)
    # lexsort: last key is primary; descending score, then ascending position
    order = np.lexsort((positions[older], -scores[older]))
    heavy = older[order[:cap - policy.recent]]
    return np.concatenate([np.sort(heavy), recent])


class KVCache:
    """Per-layer, per-head decode cache bound to one model configuration."""

    def __init__(self, model: DecoderModel, policy: EvictionPolicy = EvictionPolicy()):
        cfg = model.config
        self.config = cfg
        self.policy = policy
        self.heads = [[HeadCache.empty(cfg.head_dim) for _ in range(cfg.n_heads)]
                      for _ in range(cfg.n_layers)]
        self.next_position = 0
        self.last_probs: list[list[np.ndarray]] = [[] for _ in range(cfg.n_layers)]

    def check_model(self, model: DecoderModel) -> None:
        if model.config != self.config:
            raise StateError("cache was built for a different model configuration")

    def attend(self, layer: int, q: Tensor, k: Tensor, v: Tensor, positions) -> Tensor:
        """Single-token attention over cached entries plus the new token."""
        if q.shape[0] != 1:
            raise StateError("cached attention decodes exactly one token at a time")
        h, d = q.shape[1], q.shape[2]
        out = np.empty((1, h * d))
        probs_row = []
        pos = int(np.asarray(positions).reshape(-1)[0])
        for head in range(h):
            hc = self.heads[layer][head]
            hc.keys = np.concatenate([hc.keys, k.data[:, head]])
            hc.values = np.concatenate([hc.values, v.data[:, head]])
            hc.positions = np.append(hc.positions, pos)
            hc.scores = np.append(hc.scores, 0.0)
            scores = Tensor._wrap((hc.keys @ q.data[0, head]) / math.sqrt(d))
            p = T.softmax_rows(scores).data
            hc.scores = hc.scores + p
            out[0, head * d:(head + 1) * d] = p @ hc.values
            probs_row.append(p)
        self.last_probs[layer] = probs_row
        return Tensor._wrap(out)

    def evict(self, policy: Optional[EvictionPolicy] = None) -> list[list[list[int]]]:
        policy = policy or self.policy
        evicted = []
        for layer_heads in self.heads:
            row = []
            for hc in layer_heads:
                row.append(hc.keep(select_keep(hc.positions, hc.scores, policy)))
            evicted.append(row)
        return evicted

    def sizes(self) -> np.ndarray:
        return np.array([[len(hc) for hc in lh] for lh in self.heads])


def evict(cache: KVCache, policy: Optional[EvictionPolicy] = None) -> list[list[list[int]]]:
    """Apply ``policy`` (default: the cache's own) to every head; returns evicted positions."""
    return cache.evict(policy)


def decode_step(model: DecoderModel, cache: KVCache, token: int) -> np.ndarray:
    """Feed one token, return its next-token logits (V,), then evict once."""
    cache.check_model(model)
    tokens = _check_tokens(model, [token])
    pos = np.array([cache.next_position])
    x = T.embedding(model.params["tok_emb"], tokens)
    mode = AttnMode.full(model.config.n_heads)
    for i in range(model.config.n_layers):
        x = block(model, i, x, mode, pos, cache=cache)
    x = T.rmsnorm(x, model.params["final_norm"])
    logits = T.matmul(x, model.params["lm_head"]).data[0]
    cache.next_position += 1
    cache.evict()
    return logits


def decode_sequence(model: DecoderModel, cache: KVCache, tokens) -> np.ndarray:
    """Logits for every prefix of ``tokens``, shape (len(tokens), V)."""
    return np.stack([decode_step(model, cache, int(t)) for t in tokens])


@dataclass
class CacheStats:
    size: int = 0
    retained_score_mass: float = 0.0
    evicted_count: int = 0
    per_head: list = field(default_factory=list)


def cache_stats(cache: KVCache) -> CacheStats:
    """Totals over all (layer, head) slots."""
    per_head = [[(len(hc), float(hc.scores.sum()), hc.evicted) for hc in lh] for lh in cache.heads]
    flat = [s for lh in per_head for s in lh]
    return CacheStats(size=sum(s[0] for s in flat),
                      retained_score_mass=float(sum(s[1] for s in flat)),
                      evicted_count=sum(s[2] for s in flat),
                      per_head=per_head)
