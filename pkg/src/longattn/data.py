"""Synthetic token streams for toy training runs.

``TopicChainTask``
    Each document opens with a topic token; the rest is a walk on that
    topic's sparse Markov chain. Knowing the topic narrows every next
    token to ``branching`` successors; without it the model can only
    guess from local transitions, so long-range access to the first
    token shows up directly in perplexity.

``CopyTask``
    A random prefix, random filler, a separator, then the prefix again.

``ByteCorpus``
    Fixed-length windows cut from a UTF-8 text file.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TopicChainTask:
    seq_len: int = 257
    n_states: int = 128
    n_topics: int = 4
    branching: int = 4
    table_seed: int = 77

    def __post_init__(self):
        if self.seq_len < 2 or self.n_topics < 1 or not 1 <= self.branching <= self.n_states:
            raise ConfigError("need seq_len >= 2, n_topics >= 1 and 1 <= branching <= n_states")

    @property
    def vocab_needed(self) -> int:
        return self.n_states + self.n_topics

    def successors(self) -> np.ndarray:
        """(n_topics, n_states, branching) successor table."""
        return _topic_tables(self.n_topics, self.n_states, self.branching, self.table_seed)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        table = self.successors()
        topic = int(rng.integers(self.n_topics))
        out = np.empty(self.seq_len, dtype=np.int64)
        out[0] = self.n_states + topic
        state = int(rng.integers(self.n_states))
        out[1] = state
        for i in range(2, self.seq_len):
            state = int(table[topic, state, rng.integers(self.branching)])
            out[i] = state
        return out


@dataclass(frozen=True)
class CopyTask:
    prefix_len: int = 16
    filler_len: int = 48
    n_symbols: int = 32
    n_filler: int = 32

    @property
    def separator(self) -> int:
        return self.n_symbols + self.n_filler

    @property
    def vocab_needed(self) -> int:
        return self.separator + 1

    @property
    def seq_len(self) -> int:
        return 2 * self.prefix_len + self.filler_len + 1

    @property
    def prompt_len(self) -> int:
        return self.prefix_len + self.filler_len + 1

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        prefix = rng.integers(self.n_symbols, size=self.prefix_len)
        filler = self.n_symbols + rng.integers(self.n_filler, size=self.filler_len)
        return np.concatenate([prefix, filler, [self.separator], prefix]).astype(np.int64)


@dataclass(frozen=True)
class ByteCorpus:
    tokens: np.ndarray
    seq_len: int

    @classmethod
    def from_file(cls, path, seq_len: int) -> "ByteCorpus":
        data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)
        if data.size <= seq_len:
            raise ConfigError(f"{path}: {data.size} bytes is too short for seq_len {seq_len}")
        return cls(data, seq_len)

    @property
    def vocab_needed(self) -> int:
        return 256

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        start = int(rng.integers(self.tokens.size - self.seq_len + 1))
        return self.tokens[start:start + self.seq_len].copy()


@functools.lru_cache(maxsize=8)
def _topic_tables(n_topics: int, n_states: int, branching: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    table = np.stack([np.stack([rng.choice(n_states, branching, replace=False) for _ in range(n_states)])
                      for _ in range(n_topics)])
    table.setflags(write=False)
    return table


def batch_for_step(task, seed: int, step: int, batch_size: int) -> list[np.ndarray]:
    """Training batch for ``step``; a pure function of (seed, step) so runs can resume."""
    rng = np.random.default_rng([seed, step])
    return [task.sample(rng) for _ in range(batch_size)]
