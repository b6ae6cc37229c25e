"""Low-rank adapters on attention projections.

An adapter adds ``(alpha / r) * B @ A`` to a frozen base weight. ``B``
starts at zero, so attaching an adapter never changes model outputs until
it is trained. Embedding and normalisation gains can be left trainable
alongside the adapters via :class:`TrainabilityPolicy`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError
from .model import DecoderModel
from .tensor import Tensor

TARGETS = {"q": "wq", "k": "wk", "v": "wv", "o": "wo",
           "gate": "w_gate", "up": "w_up", "down": "w_down"}
DEFAULT_TARGETS = ("q", "k", "v", "o")


class LoraAdapter:
    def __init__(self, base: str, d_in: int, d_out: int, r: int = 8, alpha: float = 16.0,
                 rng: np.random.Generator | None = None, std: float = 0.02):
        if r < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base = base
        self.r = r
        self.alpha = float(alpha)
        self.A = Tensor(rng.normal(0.0, std, size=(r, d_in)), requires_grad=True, name=base + ".lora_A")
        self.B = Tensor(np.zeros((d_out, r)), requires_grad=True, name=base + ".lora_B")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta(self, x: Tensor) -> Tensor:
        low = T.matmul(x, T.swap_last(self.A))
        return T.scale(T.matmul(low, T.swap_last(self.B)), self.scaling)

    def delta_weight(self) -> np.ndarray:
        """Update in the base weight's (d_in, d_out) layout."""
        return self.scaling * (self.B.data @ self.A.data).T

    def n_params(self) -> int:
        return self.A.size + self.B.size

    def copy(self) -> "LoraAdapter":
        clone = LoraAdapter.__new__(LoraAdapter)
        clone.base, clone.r, clone.alpha = self.base, self.r, self.alpha
        clone.A = Tensor(self.A.data, requires_grad=self.A.requires_grad, name=self.A.name)
        clone.B = Tensor(self.B.data, requires_grad=self.B.requires_grad, name=self.B.name)
        return clone


@dataclass(frozen=True)
class TrainabilityPolicy:
    """Which parameter families receive gradients while adapters are attached."""

    embeddings: bool = True
    norms: bool = True
    lora_weights: bool = True
    base_weights: bool = False

    def apply(self, model: DecoderModel) -> None:
        for name, p in model.params.items():
            if name == "tok_emb":
                p.requires_grad = self.embeddings
            elif name.endswith("norm"):
                p.requires_grad = self.norms
            else:
                p.requires_grad = self.base_weights
        for ad in model.adapters.values():
            ad.A.requires_grad = ad.B.requires_grad = self.lora_weights

    def extra_params(self, model: DecoderModel) -> int:
        n = 0
        for name, p in model.params.items():
            if name == "tok_emb" and self.embeddings:
                n += p.size
            elif name.endswith("norm") and self.norms:
                n += p.size
        return n


def attach_lora(model: DecoderModel, targets: Iterable[str] = DEFAULT_TARGETS, r: int = 8,
                alpha: float = 16.0, policy: TrainabilityPolicy = TrainabilityPolicy(),
                seed: int = 0) -> DecoderModel:
    """Attach adapters in place to every layer's ``targets`` projections."""
    targets = list(targets)
    unknown = [t for t in targets if t not in TARGETS]
    if unknown:
        raise ConfigError(f"unknown LoRA target(s): {unknown}")
    if model.adapters:
        raise StateError("adapters are already attached")
    rng = np.random.default_rng(seed)
    for layer in range(model.config.n_layers):
        for t in targets:
            name = f"layers.{layer}.{TARGETS[t]}"
            d_in, d_out = model.params[name].shape
            model.adapters[name] = LoraAdapter(name, d_in, d_out, r, alpha, rng)
    model.merged = False
    policy.apply(model)
    return model


def trainable_count(model: DecoderModel) -> int:
    return sum(p.size for p in model.trainable_parameters())


def merge_lora(model: DecoderModel) -> DecoderModel:
    """Fold adapters into the base weights in place; the model becomes plain again."""
    if not model.adapters:
        raise StateError("no adapters attached (already merged?)")
    for name, ad in model.adapters.items():
        base = model.params[name]
        base.data = base.data + ad.delta_weight()
    model.adapters = {}
    model.merged = True
    for p in model.params.values():
        p.requires_grad = True
    return model
