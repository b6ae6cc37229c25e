"""Experiment configuration: one JSON document, every field defaulted."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .kvcache import EvictionPolicy
from .model import AttnMode, ModelConfig
from .patterns import HeadGroupAssignment, PatternKind, PatternSpec

ATTENTION_KINDS = ("roll", "shifted_heads") + tuple(k.value for k in PatternKind)
TASKS = ("topic_chain", "copy", "text")


@dataclass
class AttentionConfig:
    """``roll`` and ``shifted_heads`` are the two executions of group + shifted-group halves."""

    kind: str = "full_causal"
    group_size: int = 64
    num_sink: int = 4
    stride: int = 4
    random_k: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; choose from {ATTENTION_KINDS}")

    def pattern_spec(self) -> PatternSpec:
        return PatternSpec(PatternKind(self.kind), self.group_size, self.num_sink, self.stride,
                           self.random_k, self.seed)

    def build(self, n_heads: int) -> AttnMode:
        self.validate()
        if self.kind == "roll":
            return AttnMode.roll_based(self.group_size)
        if self.kind == "shifted_heads":
            return AttnMode.mask_based(HeadGroupAssignment.shifted(self.group_size, n_heads))
        return AttnMode.pattern(self.pattern_spec(), n_heads)


@dataclass
class LoraConfig:
    enabled: bool = False
    r: int = 8
    alpha: float = 16.0
    targets: list = field(default_factory=lambda: ["q", "k", "v", "o"])
    train_embeddings: bool = True
    train_norms: bool = True


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 3e-4
    warmup: int = 20
    batch: int = 1
    seed: int = 0
    task: str = "topic_chain"
    seq_len: int = 257
    text_path: Optional[str] = None
    init_checkpoint: Optional[str] = None
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.steps < 0 or self.batch < 1 or self.warmup < 0:
            raise ConfigError("train.steps >= 0, train.batch >= 1 and train.warmup >= 0 are required")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.task == "text" and not self.text_path:
            raise ConfigError("task 'text' needs train.text_path")
        if self.seq_len < 2:
            raise ConfigError("train.seq_len must be >= 2")


@dataclass
class EvalConfig:
    text_path: Optional[str] = None
    context_lengths: list = field(default_factory=lambda: [64, 128])
    stride: int = 32
    passkey_m: list = field(default_factory=lambda: [0, 1, 2])
    passkey_n: list = field(default_factory=lambda: [0, 1, 2])
    passkey_trials: int = 10
    retriever: str = "model"

    def validate(self) -> None:
        if not self.context_lengths or min(self.context_lengths) < 2:
            raise ConfigError("eval.context_lengths must be non-empty and >= 2")
        if self.stride < 1:
            raise ConfigError("eval.stride must be >= 1")
        if self.retriever not in ("model", "oracle"):
            raise ConfigError("eval.retriever must be 'model' or 'oracle'")
        if self.passkey_trials < 1 or min(self.passkey_m + self.passkey_n, default=0) < 0:
            raise ConfigError("passkey trials must be >= 1 and repetition counts >= 0")


@dataclass
class CacheConfig:
    policies: list = field(default_factory=lambda: ["full", "local", "h2o", "sink"])
    budget_pcts: list = field(default_factory=lambda: [25, 50, 100])
    recent_frac: float = 0.5
    num_sink: int = 4
    prompts: int = 4
    prompt_task: str = "copy"

    def validate(self) -> None:
        for p in self.policies:
            if p not in ("full", "local", "h2o", "sink"):
                raise ConfigError(f"unknown cache policy {p!r}")
        if any(not 0 < b <= 100 for b in self.budget_pcts):
            raise ConfigError("budget percentages must be in (0, 100]")
        if not 0 < self.recent_frac < 1:
            raise ConfigError("cache.recent_frac must be in (0, 1)")
        if self.prompts < 1 or self.prompt_task not in ("copy", "topic_chain"):
            raise ConfigError("cache.prompts >= 1 and prompt_task in {copy, topic_chain}")

    def policy(self, kind: str, budget: int) -> EvictionPolicy:
        if kind == "full":
            return EvictionPolicy.full()
        budget = max(budget, 2)
        if kind == "local":
            return EvictionPolicy.local(budget)
        if kind == "h2o":
            recent = min(max(1, round(budget * self.recent_frac)), budget - 1)
            return EvictionPolicy.h2o(budget, recent)
        return EvictionPolicy.sink(min(self.num_sink, budget - 1), budget)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    output_dir: str = "out"

    def validate(self) -> None:
        self.model.validate()
        self.attention.validate()
        self.train.validate()
        self.eval.validate()
        self.cache.validate()
        self.attention.build(self.model.n_heads)
        if self.lora.enabled and self.lora.r < 1:
            raise ConfigError("lora.r must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            cfg = _build(cls, d, "")
            cfg.validate()
        except TypeError as e:
            raise ConfigError(f"config has a field of the wrong type: {e}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a config file. Missing files raise OSError; bad JSON raises ConfigError."""
        text = Path(path).read_text()
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown field(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _nested_types.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


_nested_types = {(ExperimentConfig, f.name): f.default_factory
                 for f in fields(ExperimentConfig)
                 if callable(f.default_factory) and is_dataclass(f.default_factory)}
