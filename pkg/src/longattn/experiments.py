"""Paired toy experiments: attention-pattern comparison and eviction quality.

Both drivers are deterministic in their seeds and return plain dataclasses,
so tests, the CLI and notebooks can share them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import CopyTask, TopicChainTask, batch_for_step
from .eval import copy_accuracy
from .kvcache import EvictionPolicy, KVCache, decode_step
from .model import AdamW, AttnMode, DecoderModel, ModelConfig, forward, init_model, lr_at, train_step
from .patterns import PatternKind, PatternSpec
from .tensor import log_softmax_np

TOY_LR = 1e-3
GAP_GUARD = 0.05


@dataclass
class ToyRun:
    name: str
    model: DecoderModel
    mode: AttnMode
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def train_toy(name: str, config: ModelConfig, mode: AttnMode, task, steps: int, lr: float = TOY_LR,
              seed: int = 0, batch: int = 1) -> ToyRun:
    model = init_model(config)
    opt = AdamW()
    run = ToyRun(name, model, mode)
    began = time.perf_counter()
    for step in range(steps):
        run.losses.append(train_step(model, batch_for_step(task, seed, step, batch), mode, opt,
                                     lr_at(step, lr)))
    run.seconds = time.perf_counter() - began
    return run


def heldout_perplexity(model: DecoderModel, mode: AttnMode, task, n_docs: int = 32,
                       seed: int = 10_000) -> float:
    """exp(mean next-token NLL) over fresh documents, scored under ``mode``."""
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for _ in range(n_docs):
        seq = task.sample(rng)
        logp = log_softmax_np(forward(model, seq[:-1], mode).data)
        total -= logp[np.arange(seq.size - 1), seq[1:]].sum()
        count += seq.size - 1
    return math.exp(total / count)


def pattern_modes(n_heads: int, group_size: int = 64, num_sink: int = 4) -> dict[str, AttnMode]:
    return {
        "full": AttnMode.full(n_heads),
        "shifted_sparse": AttnMode.roll_based(group_size),
        "sink_fixed": AttnMode.pattern(PatternSpec(PatternKind.SINK_FIXED, group_size, num_sink), n_heads),
    }


@dataclass
class PatternComparison:
    steps: int
    perplexity: dict
    seconds: float

    @property
    def gap(self) -> float:
        """How much worse shifted-sparse attention is than full attention."""
        return self.perplexity["shifted_sparse"] - self.perplexity["full"]

    @property
    def residual_fraction(self) -> float:
        """|ppl(sink_fixed) - ppl(full)| as a fraction of the gap (nan if the gap is not positive)."""
        if self.gap <= 0:
            return math.nan
        return abs(self.perplexity["sink_fixed"] - self.perplexity["full"]) / self.gap

    def sink_not_worse(self) -> bool:
        return self.perplexity["sink_fixed"] <= self.perplexity["shifted_sparse"]

    def closes_gap(self, bound: float = 0.5) -> bool:
        return self.sink_not_worse() and self.residual_fraction < bound


def compare_patterns(steps: int = 1000, widened_steps: int = 2000, seed: int = 0,
                     config: ModelConfig = ModelConfig(), task=TopicChainTask(),
                     group_size: int = 64, num_sink: int = 4, lr: float = TOY_LR,
                     n_eval_docs: int = 32) -> PatternComparison:
    """Train full, shifted-sparse and sink-fixed models on identical data and compare perplexity.

    If the full vs shifted-sparse gap is below ``GAP_GUARD`` the comparison is
    too noisy to mean anything, so all three runs are repeated at
    ``widened_steps``.
    """
    began = time.perf_counter()
    modes = pattern_modes(config.n_heads, group_size, num_sink)
    for n_steps in (steps, widened_steps):
        ppl = {}
        for name, mode in modes.items():
            run = train_toy(name, config, mode, task, n_steps, lr, seed)
            ppl[name] = heldout_perplexity(run.model, mode, task, n_eval_docs, seed=10_000 + seed)
        result = PatternComparison(n_steps, ppl, time.perf_counter() - began)
        if result.gap >= GAP_GUARD:
            break
    return result


# ---------------------------------------------------------------- eviction quality

COPY_CONFIG = ModelConfig(vocab_size=CopyTask().vocab_needed, d_model=32, n_heads=4, n_layers=2, d_ff=64, seed=0)


def train_copy_model(steps: int = 5000, lr: float = TOY_LR, seed: int = 0,
                     config: ModelConfig = COPY_CONFIG, task: CopyTask = CopyTask()) -> DecoderModel:
    return train_toy("copy", config, AttnMode.full(config.n_heads), task, steps, lr, seed).model


def eviction_policies(budget: int, num_sink: int = 4) -> dict[str, EvictionPolicy]:
    return {
        "full": EvictionPolicy.full(),
        "local": EvictionPolicy.local(budget),
        "h2o": EvictionPolicy.h2o(budget, max(1, budget // 2)),
        "sink": EvictionPolicy.sink(num_sink, budget),
    }


def eviction_accuracy(model: DecoderModel, task: CopyTask = CopyTask(), budget_frac: float = 0.5,
                      n_prompts: int = 32, seed: int = 1, num_sink: int = 4) -> dict[str, float]:
    budget = max(2, math.ceil(task.seq_len * budget_frac))
    return {name: copy_accuracy(model, task, policy, n_prompts, seed)
            for name, policy in eviction_policies(budget, num_sink).items()}


def sink_retention_trace(model: DecoderModel, tokens, policy: EvictionPolicy) -> bool:
    """True if every head keeps positions 0..num_sink-1 after every decode step."""
    cache = KVCache(model, policy)
    for step, tok in enumerate(tokens):
        decode_step(model, cache, int(tok))
        expected = list(range(min(policy.num_sink, step + 1)))
        for layer in cache.heads:
            for hc in layer:
                if hc.positions[:len(expected)].tolist() != expected:
                    return False
    return True
