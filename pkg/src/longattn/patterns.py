"""Attention patterns as explicit boolean adjacency masks.

Every builder returns an :class:`AttentionMask` whose ``allowed[i, j]`` says
whether query ``i`` may attend to key ``j``. The causal intersection is
always applied last, so no builder can leak future tokens.

The module also holds the segmentation/reassembly roll used by shifted
group attention (:func:`sr_shift`, :func:`sr_unshift`) and the mask oracle
describing what that roll pipeline computes (:func:`roll_mask_oracle`).
"""

from __future__ import annotations

import enum
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, gather_flat


class AttentionMask:
    """Immutable n x n allowed-to-attend matrix."""

    __slots__ = ("allowed",)

    def __init__(self, allowed: np.ndarray):
        allowed = np.array(allowed, dtype=bool)
        if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
            raise ConfigError(f"mask must be square, got {allowed.shape}")
        allowed.setflags(write=False)
        self.allowed = allowed

    @property
    def n(self) -> int:
        return self.allowed.shape[0]

    def nnz(self) -> int:
        return int(self.allowed.sum())

    def is_causal(self) -> bool:
        return not np.triu(self.allowed, k=1).any()

    def has_self_edges(self) -> bool:
        return bool(np.diagonal(self.allowed).all())

    def rows(self) -> list[str]:
        return ["".join("1" if v else "0" for v in row) for row in self.allowed]

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.allowed, other.allowed)

    def __hash__(self) -> int:
        return hash(self.allowed.tobytes())

    def __repr__(self) -> str:
        return f"AttentionMask(n={self.n}, nnz={self.nnz()})"

    def to_pgm(self) -> str:
        """Plain-text PGM (P2); allowed cells are 255, blocked cells 0."""
        buf = io.StringIO()
        buf.write(f"P2\n{self.n} {self.n}\n255\n")
        for row in self.allowed:
            buf.write(" ".join("255" if v else "0" for v in row))
            buf.write("\n")
        return buf.getvalue()

    def to_csv(self) -> str:
        """Edge list ``i,j`` with a header, row-major order."""
        buf = io.StringIO()
        buf.write("i,j\n")
        for i, j in zip(*np.nonzero(self.allowed)):
            buf.write(f"{i},{j}\n")
        return buf.getvalue()


def nnz(mask: AttentionMask) -> int:
    return mask.nnz()


def _causal(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _check_n(n: int) -> None:
    if n < 1:
        raise ConfigError(f"sequence length must be >= 1, got {n}")


def _check_group(n: int, w: int) -> None:
    _check_n(n)
    if w < 1 or n % w:
        raise ConfigError(f"group size {w} must be a positive divisor of n={n}")


def build_full_causal(n: int) -> AttentionMask:
    _check_n(n)
    return AttentionMask(_causal(n))


def _group_ids(n: int, w: int) -> np.ndarray:
    return np.arange(n) // w


def build_group(n: int, w: int) -> AttentionMask:
    _check_group(n, w)
    gid = _group_ids(n, w)
    return AttentionMask((gid[:, None] == gid[None, :]) & _causal(n))


def build_shifted_group(n: int, w: int) -> AttentionMask:
    """Groups offset by w/2; the last and first w/2 tokens share a wrapped group.

    Causality is enforced on original positions, which cuts the wrapped
    group down to "tail tokens see head tokens".
    """
    _check_group(n, w)
    if w % 2:
        raise ConfigError(f"shifted group attention needs an even group size, got {w}")
    gid = ((np.arange(n) - w // 2) % n) // w
    return AttentionMask((gid[:, None] == gid[None, :]) & _causal(n))


def build_sink_fixed(n: int, w: int, g: int) -> AttentionMask:
    _check_group(n, w)
    if g < 0 or g >= w:
        raise ConfigError(f"sink count g={g} must satisfy 0 <= g < w={w}")
    allowed = build_group(n, w).allowed.copy()
    allowed[:g, :] = True
    allowed[:, :g] = True
    return AttentionMask(allowed & _causal(n))


def build_sparse_fixed(n: int, w: int, g: int) -> AttentionMask:
    """Group windows plus the last ``g`` positions of every earlier group."""
    _check_group(n, w)
    if g < 0:
        raise ConfigError(f"summary count must be >= 0, got {g}")
    gid = _group_ids(n, w)
    summary = (np.arange(n) % w) >= w - g
    allowed = (gid[:, None] == gid[None, :]) | ((gid[None, :] < gid[:, None]) & summary[None, :])
    return AttentionMask(allowed & _causal(n))


def build_stride(n: int, s: int, w: int) -> AttentionMask:
    _check_n(n)
    if s < 1:
        raise ConfigError(f"stride must be >= 1, got {s}")
    if w < 0:
        raise ConfigError(f"local window must be >= 0, got {w}")
    dist = np.arange(n)[:, None] - np.arange(n)[None, :]
    allowed = (dist < w) | (dist % s == 0)
    return AttentionMask(allowed & _causal(n))


def _row_rng(seed: int, row: int) -> np.random.Generator:
    # Philox is counter-based: the (seed, row) pair fully determines the stream.
    key = (int(row) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def build_random(n: int, k: int, seed: int) -> AttentionMask:
    _check_n(n)
    if k < 1:
        raise ConfigError(f"random_k must be >= 1, got {k}")
    allowed = np.eye(n, dtype=bool)
    for i in range(1, n):
        picks = _row_rng(seed, i).choice(i, size=min(k, i), replace=False)
        allowed[i, picks] = True
    return AttentionMask(allowed)


class PatternKind(str, enum.Enum):
    FULL_CAUSAL = "full_causal"
    GROUP = "group"
    SHIFTED_GROUP = "shifted_group"
    SINK_FIXED = "sink_fixed"
    SPARSE_FIXED = "sparse_fixed"
    STRIDE = "stride"
    RANDOM = "random"


@dataclass(frozen=True)
class PatternSpec:
    """Declarative attention pattern; parameters a kind does not use are ignored."""

    kind: PatternKind = PatternKind.FULL_CAUSAL
    group_size: int = 64
    num_sink: int = 4
    stride: int = 4
    random_k: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PatternKind(self.kind))
        for name in ("group_size", "num_sink", "stride", "random_k", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"pattern parameter {name} must be non-negative")

    def build(self, n: int) -> AttentionMask:
        k = self.kind
        if k is PatternKind.FULL_CAUSAL:
            return build_full_causal(n)
        if k is PatternKind.GROUP:
            return build_group(n, self.group_size)
        if k is PatternKind.SHIFTED_GROUP:
            return build_shifted_group(n, self.group_size)
        if k is PatternKind.SINK_FIXED:
            return build_sink_fixed(n, self.group_size, self.num_sink)
        if k is PatternKind.SPARSE_FIXED:
            return build_sparse_fixed(n, self.group_size, self.num_sink)
        if k is PatternKind.STRIDE:
            return build_stride(n, self.stride, self.group_size)
        return build_random(n, self.random_k, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pattern fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except ValueError as e:
            raise ConfigError(str(e)) from None


@dataclass(frozen=True)
class HeadGroupAssignment:
    """One pattern for the first half of the heads, another for the second half."""

    n_heads: int
    pattern_per_half: tuple = field(default=(PatternSpec(), PatternSpec()))

    def __post_init__(self):
        first, second = self.pattern_per_half
        if self.n_heads < 1:
            raise ConfigError("n_heads must be >= 1")
        if first != second and self.n_heads % 2:
            raise ConfigError("n_heads must be even when the two head halves differ")

    @classmethod
    def uniform(cls, spec: PatternSpec, n_heads: int) -> "HeadGroupAssignment":
        return cls(n_heads, (spec, spec))

    @classmethod
    def shifted(cls, w: int, n_heads: int) -> "HeadGroupAssignment":
        """Mask-based S2 attention: plain groups, then groups shifted by w/2."""
        return cls(n_heads, (PatternSpec(PatternKind.GROUP, group_size=w),
                             PatternSpec(PatternKind.SHIFTED_GROUP, group_size=w)))

    def masks(self, n: int) -> np.ndarray:
        """Stacked per-head masks, shape (n_heads, n, n)."""
        first, second = self.pattern_per_half
        a = first.build(n).allowed
        b = a if second == first else second.build(n).allowed
        half = self.n_heads // 2 if first != second else self.n_heads
        return np.stack([a] * half + [b] * (self.n_heads - half))

    def to_dict(self) -> dict:
        return {"n_heads": self.n_heads,
                "pattern_per_half": [p.to_dict() for p in self.pattern_per_half]}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadGroupAssignment":
        halves = tuple(PatternSpec.from_dict(p) for p in d["pattern_per_half"])
        return cls(int(d["n_heads"]), halves)


# ---------------------------------------------------------------- segmentation & reassembly

def _check_roll(n_tokens: int, n_heads: int, w: int) -> None:
    if w < 2 or w % 2:
        raise ConfigError(f"roll group size must be even and >= 2, got {w}")
    if n_tokens % w:
        raise ConfigError(f"group size {w} must divide sequence length {n_tokens}")
    if n_heads % 2:
        raise ConfigError(f"roll needs an even head count, got {n_heads}")


def _roll_index(shape: tuple, shift: int) -> np.ndarray:
    b, n, h, d = shape
    idx = np.arange(b * n * h * d).reshape(shape)
    idx[:, :, h // 2:] = np.roll(idx[:, :, h // 2:], -shift, axis=1)
    return idx


def sr_shift(x: Tensor, w: int) -> Tensor:
    """Roll the token axis of the second-half heads by -w/2.

    ``out[b, t, h] = x[b, (t + w/2) % N, h]`` for ``h >= H/2``; first-half
    heads pass through. Input layout is (B, N, H, D).
    """
    if x.ndim != 4:
        raise ConfigError(f"sr_shift expects (B, N, H, D), got {x.shape}")
    _check_roll(x.shape[1], x.shape[2], w)
    return gather_flat(x, _roll_index(x.shape, w // 2))


def sr_unshift(x: Tensor, w: int) -> Tensor:
    """Exact inverse of :func:`sr_shift`."""
    if x.ndim != 4:
        raise ConfigError(f"sr_unshift expects (B, N, H, D), got {x.shape}")
    _check_roll(x.shape[1], x.shape[2], w)
    return gather_flat(x, _roll_index(x.shape, -(w // 2)))


def rolled_positions(n: int, w: int) -> np.ndarray:
    """Original token index sitting at each rolled slot of a shifted head."""
    return (np.arange(n) + w // 2) % n


def roll_mask_oracle(n: int, w: int, n_heads: int) -> list[AttentionMask]:
    """Per-head masks, on original token indices, realised by the roll pipeline.

    Built by brute force: for every pair of rolled slots in the same
    contiguous group, map both back through the roll permutation and keep
    the pair when the key does not come after the query.
    """
    _check_roll(n, n_heads, w)
    plain = build_group(n, w)
    orig = rolled_positions(n, w)
    shifted = np.zeros((n, n), dtype=bool)
    for t in range(n):
        for u in range(n):
            if t // w == u // w and orig[u] <= orig[t]:
                shifted[orig[t], orig[u]] = True
    shifted_mask = AttentionMask(shifted)
    half = n_heads // 2
    return [plain] * half + [shifted_mask] * (n_heads - half)


def build_mask(spec: PatternSpec, n: int) -> AttentionMask:
    return spec.build(n)


__all__ = [
    "AttentionMask", "PatternKind", "PatternSpec", "HeadGroupAssignment",
    "build_full_causal", "build_group", "build_shifted_group", "build_sink_fixed",
    "build_sparse_fixed", "build_stride", "build_random", "build_mask", "nnz",
    "sr_shift", "sr_unshift", "roll_mask_oracle", "rolled_positions",
]
