"""Toy Llama-style decoder: RMSNorm, gated FFN, rotary positions.

The attention layer runs in one of two modes:

* mask-based: dense masked softmax, one mask per head from a
  :class:`HeadGroupAssignment`;
* roll-based: the shift / attend-in-groups / shift-back pipeline, which
  never materialises an N x N mask.

Sequences are processed one at a time (B=1); batching happens in
:func:`train_step`.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .patterns import HeadGroupAssignment, PatternKind, PatternSpec, sr_shift, sr_unshift
from .tensor import Tape, Tensor


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 4
    d_ff: int = 256
    max_positions: int = 1024
    rope_theta: float = 10000.0
    pos_interp_factor: float = 1.0
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.n_heads % 2:
            raise ConfigError(f"n_heads must be even, got {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        if self.pos_interp_factor < 1:
            raise ConfigError("pos_interp_factor must be >= 1")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


def parameter_count(config: ModelConfig) -> int:
    v, d, f, n_layers = config.vocab_size, config.d_model, config.d_ff, config.n_layers
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    return v * d + n_layers * per_layer + d + d * v


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    v, d, f = config.vocab_size, config.d_model, config.d_ff
    shapes = {"tok_emb": (v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ffn_norm": (d,),
            p + "w_gate": (d, f), p + "w_up": (d, f), p + "w_down": (f, d),
        })
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, v)
    return shapes


class DecoderModel:
    """Parameters plus optional low-rank adapters keyed by projection name.

    Linear weights are stored (d_in, d_out) so a projection is ``x @ W``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ConfigError("parameter names do not match the config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != expected {shape}")
        self.config = config
        self.params = params
        self.adapters: dict = {}
        self.merged = False

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def named_parameters(self):
        yield from self.params.items()
        for name, ad in self.adapters.items():
            yield name + ".lora_A", ad.A
            yield name + ".lora_B", ad.B

    def trainable_parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def proj(self, x: Tensor, name: str) -> Tensor:
        y = T.matmul(x, self.params[name])
        adapter = self.adapters.get(name)
        if adapter is not None:
            y = T.add(y, adapter.delta(x))
        return y

    def copy(self) -> "DecoderModel":
        params = {}
        for k, p in self.params.items():
            params[k] = Tensor(p.data, requires_grad=p.requires_grad, name=k)
        clone = DecoderModel(self.config, params)
        for k, ad in self.adapters.items():
            clone.adapters[k] = ad.copy()
        return clone


def init_model(config: ModelConfig) -> DecoderModel:
    """Normal(0, init_std) weights and unit norm gains, deterministic in ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return DecoderModel(config, params)


# ---------------------------------------------------------------- positions

def rope_angles(positions, head_dim: int, theta: float = 10000.0,
                interp_factor: float = 1.0) -> np.ndarray:
    """Rotation angles (len(positions), head_dim/2) at position p / interp_factor."""
    if head_dim % 2:
        raise ConfigError(f"rotary embeddings need an even head dim, got {head_dim}")
    if interp_factor < 1:
        raise ConfigError("interp_factor must be >= 1")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    pos = np.asarray(positions, dtype=np.float64) / interp_factor
    return pos[:, None] * inv_freq[None, :]


def apply_rope(x: Tensor, positions, theta: float = 10000.0, interp_factor: float = 1.0) -> Tensor:
    """Rotary embedding for x laid out (..., N, H, D)."""
    if x.ndim < 3:
        raise ConfigError(f"apply_rope expects (..., N, H, D), got {x.shape}")
    if x.shape[-1] % 2:
        raise ConfigError(f"rotary embeddings need an even head dim, got {x.shape[-1]}")
    ang = rope_angles(positions, x.shape[-1], theta, interp_factor)[:, None, :]
    return T.rotate_pairs(x, np.cos(ang), np.sin(ang))


# ---------------------------------------------------------------- attention

@dataclass(frozen=True)
class AttnMode:
    """How attention is executed: ``mask`` (per-head masks) or ``roll`` (shift pipeline)."""

    kind: str
    heads: Optional[HeadGroupAssignment] = None
    group_size: int = 0

    def __post_init__(self):
        if self.kind == "mask":
            if self.heads is None:
                raise ConfigError("mask-based mode needs a HeadGroupAssignment")
        elif self.kind == "roll":
            if self.group_size < 2 or self.group_size % 2:
                raise ConfigError("roll-based mode needs an even group size >= 2")
        else:
            raise ConfigError(f"unknown attention mode {self.kind!r}")

    @classmethod
    def mask_based(cls, heads: HeadGroupAssignment) -> "AttnMode":
        return cls("mask", heads=heads)

    @classmethod
    def roll_based(cls, w: int) -> "AttnMode":
        return cls("roll", group_size=w)

    @classmethod
    def pattern(cls, spec: PatternSpec, n_heads: int) -> "AttnMode":
        return cls("mask", heads=HeadGroupAssignment.uniform(spec, n_heads))

    @classmethod
    def full(cls, n_heads: int) -> "AttnMode":
        return cls.pattern(PatternSpec(PatternKind.FULL_CAUSAL), n_heads)

    def validate_for(self, n_tokens: int, n_heads: int) -> None:
        if self.kind == "roll":
            if n_heads % 2:
                raise ConfigError("roll-based attention needs an even head count")
            if n_tokens % self.group_size:
                raise ConfigError(f"group size {self.group_size} must divide N={n_tokens}")
        elif self.heads.n_heads != n_heads:
            raise ConfigError(f"head assignment covers {self.heads.n_heads} heads, model has {n_heads}")

    def to_dict(self) -> dict:
        if self.kind == "roll":
            return {"kind": "roll", "group_size": self.group_size}
        return {"kind": "mask", "heads": self.heads.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttnMode":
        if d.get("kind") == "roll":
            return cls.roll_based(int(d["group_size"]))
        if d.get("kind") == "mask":
            return cls.mask_based(HeadGroupAssignment.from_dict(d["heads"]))
        raise ConfigError(f"unknown attention mode {d.get('kind')!r}")


@functools.lru_cache(maxsize=64)
def _head_masks(heads: HeadGroupAssignment, n: int) -> np.ndarray:
    m = heads.masks(n)
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=64)
def _roll_group_mask(n: int, w: int, n_heads: int) -> np.ndarray:
    """Causal mask inside each rolled group, shape (H, G, w, w), on original positions."""
    pos = np.tile(np.arange(n), (n_heads, 1))
    pos[n_heads // 2:] = (np.arange(n) + w // 2) % n
    pos = pos.reshape(n_heads, n // w, w)
    m = pos[..., None, :] <= pos[..., :, None]
    m.setflags(write=False)
    return m


def _mask_attention(q: Tensor, k: Tensor, v: Tensor, heads: HeadGroupAssignment,
                    record: Optional[list]) -> Tensor:
    n, h, d = q.shape
    qh, kh, vh = (T.transpose(t, (1, 0, 2)) for t in (q, k, v))
    scores = T.scale(T.matmul(qh, T.swap_last(kh)), 1.0 / math.sqrt(d))
    probs = T.softmax_rows(scores, _head_masks(heads, n))
    if record is not None:
        record.append(probs.data.copy())
    out = T.matmul(probs, vh)
    return T.reshape(T.transpose(out, (1, 0, 2)), (n, h * d))


def _roll_attention(q: Tensor, k: Tensor, v: Tensor, w: int) -> Tensor:
    n, h, d = q.shape
    g = n // w

    def to_groups(t):
        rolled = sr_shift(T.reshape(t, (1, n, h, d)), w)
        return T.transpose(T.reshape(rolled, (g, w, h, d)), (2, 0, 1, 3))

    qg, kg, vg = to_groups(q), to_groups(k), to_groups(v)
    scores = T.scale(T.matmul(qg, T.swap_last(kg)), 1.0 / math.sqrt(d))
    probs = T.softmax_rows(scores, _roll_group_mask(n, w, h))
    out = T.transpose(T.matmul(probs, vg), (1, 2, 0, 3))
    out = sr_unshift(T.reshape(out, (1, n, h, d)), w)
    return T.reshape(out, (n, h * d))


def attention_layer(model: DecoderModel, layer: int, x: Tensor, mode: AttnMode,
                    positions=None, cache=None, record: Optional[list] = None) -> Tensor:
    """Multi-head attention for one layer on normalised input ``x`` (N, d_model).

    With a ``cache`` the call is a single-token decode step against the
    cached keys and values (see ``longattn.kvcache``).
    """
    cfg = model.config
    n = x.shape[0]
    h, d = cfg.n_heads, cfg.head_dim
    if positions is None:
        positions = np.arange(n)
    p = f"layers.{layer}."
    q = T.reshape(model.proj(x, p + "wq"), (n, h, d))
    k = T.reshape(model.proj(x, p + "wk"), (n, h, d))
    v = T.reshape(model.proj(x, p + "wv"), (n, h, d))
    q = apply_rope(q, positions, cfg.rope_theta, cfg.pos_interp_factor)
    k = apply_rope(k, positions, cfg.rope_theta, cfg.pos_interp_factor)
    if cache is not None:
        out = cache.attend(layer, q, k, v, positions)
    else:
        mode.validate_for(n, h)
        if mode.kind == "roll":
            if record is not None:
                raise ConfigError("attention recording needs a mask-based mode")
            out = _roll_attention(q, k, v, mode.group_size)
        else:
            out = _mask_attention(q, k, v, mode.heads, record)
    return model.proj(out, p + "wo")


def block(model: DecoderModel, layer: int, x: Tensor, mode: AttnMode, positions=None,
          cache=None, record: Optional[list] = None) -> Tensor:
    p = f"layers.{layer}."
    hn = T.rmsnorm(x, model.params[p + "attn_norm"])
    x = T.add(x, attention_layer(model, layer, hn, mode, positions, cache, record))
    hn = T.rmsnorm(x, model.params[p + "ffn_norm"])
    gate = T.silu(model.proj(hn, p + "w_gate"))
    up = model.proj(hn, p + "w_up")
    return T.add(x, model.proj(T.mul(gate, up), p + "w_down"))


def _check_tokens(model: DecoderModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    cfg = model.config
    if tokens.ndim != 1 or tokens.size == 0:
        raise ConfigError("tokens must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    return tokens


def forward(model: DecoderModel, tokens, mode: AttnMode,
            record: Optional[list] = None) -> Tensor:
    """Next-token logits (N, V) for one sequence.

    ``record``, when given, receives each layer's attention probabilities
    as an (H, N, N) array.
    """
    tokens = _check_tokens(model, tokens)
    cfg = model.config
    if tokens.size > cfg.max_positions * cfg.pos_interp_factor:
        raise ConfigError(f"sequence of {tokens.size} tokens exceeds the position range")
    x = T.embedding(model.params["tok_emb"], tokens)
    positions = np.arange(tokens.size)
    for i in range(cfg.n_layers):
        x = block(model, i, x, mode, positions, record=record)
    x = T.rmsnorm(x, model.params["final_norm"])
    return T.matmul(x, model.params["lm_head"])


def sequence_loss(model: DecoderModel, tokens, mode: AttnMode) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise ConfigError("a training sequence needs at least 2 tokens")
    logits = forward(model, tokens[:-1], mode)
    return T.cross_entropy(logits, tokens[1:])


# ---------------------------------------------------------------- optimisation

PRETRAIN_LR = 3e-4
FINETUNE_LR = 2e-5
WARMUP_STEPS = 20


def lr_at(step: int, base_lr: float, warmup: int = WARMUP_STEPS) -> float:
    """Linear warmup over ``warmup`` steps, then constant."""
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup)


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, named: list[tuple[str, Tensor]], lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in named:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(model: DecoderModel, batch, mode: AttnMode, optimizer: AdamW,
               lr: float = PRETRAIN_LR) -> float:
    """One optimiser step on the mean next-token loss; returns the pre-update loss."""
    batch = [np.asarray(s, dtype=np.int64) for s in batch]
    if not batch:
        raise ConfigError("empty batch")
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    for _, p in named:
        p.grad = None
    total = 0.0
    for seq in batch:
        with Tape() as tape:
            loss = T.scale(sequence_loss(model, seq, mode), 1.0 / len(batch))
        total += loss.item()
        T.backward(loss, tape)
    optimizer.update(named, lr)
    return total
