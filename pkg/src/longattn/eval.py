"""Evaluation harnesses: sliding-window perplexity, passkey retrieval, sink mass."""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .kvcache import EvictionPolicy, KVCache, decode_step
from .model import AttnMode, DecoderModel, forward
from .tensor import log_softmax_np


class ByteTokenizer:
    """UTF-8 bytes as token ids 0..255."""

    vocab_size = 256

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


# ---------------------------------------------------------------- perplexity

@dataclass
class PplReport:
    context_length: int
    stride: int
    total_nll: float
    token_count: int
    perplexity: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def sliding_windows(length: int, context_len: int, stride: int) -> list[tuple[int, int, int]]:
    """(begin, stop, first) per window.

    The model reads ``tokens[begin:stop-1]`` (at most ``context_len``
    tokens) and window scores targets ``first..stop-1``. Consecutive
    windows advance ``stop`` by ``stride``; each target is scored by exactly
    one window and always has at least one token of context.
    """
    windows = []
    prev_stop = 1
    stop = min(context_len + 1, length)
    while True:
        windows.append((max(0, stop - 1 - context_len), stop, prev_stop))
        if stop == length:
            return windows
        prev_stop = stop
        stop = min(stop + stride, length)


def window_nll(model: DecoderModel, tokens: np.ndarray, begin: int, end: int, first: int,
               mode: AttnMode) -> tuple[float, int]:
    logp = log_softmax_np(forward(model, tokens[begin:end - 1], mode).data)
    rows = np.arange(first - 1 - begin, end - 1 - begin)
    targets = tokens[first:end]
    return float(-logp[rows, targets].sum()), int(targets.size)


def perplexity(model: DecoderModel, tokens, context_len: int, stride: int,
               mode: Optional[AttnMode] = None, threads: int = 1) -> PplReport:
    """exp(mean NLL) over ``tokens`` with windows of ``context_len`` moving by ``stride``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if not 1 <= stride <= context_len:
        raise ConfigError(f"stride must be in [1, context_len], got {stride}")
    if tokens.size <= context_len:
        raise ConfigError(f"stream of {tokens.size} tokens is not longer than one window ({context_len})")
    mode = mode or AttnMode.full(model.config.n_heads)
    windows = sliding_windows(tokens.size, context_len, stride)

    def run(w):
        return window_nll(model, tokens, *w, mode)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, windows))
    else:
        parts = [run(w) for w in windows]
    total = 0.0
    count = 0
    for nll, n in parts:
        total += nll
        count += n
    return PplReport(context_len, stride, total, count, math.exp(total / count))


# ---------------------------------------------------------------- passkey retrieval

FILLER = "The flowers are blooming. The trees are tall. The river flows. Just keep going. Onward and upward."
KEY_TEMPLATE = "Critical Note: The passkey is {key}. Remember this number. {key} is the passkey."
QUESTION = "What is the passkey? The passkey is"
_FIVE_DIGITS = re.compile(r"(?<!\d)\d{5}(?!\d)")
_KEY_IN_PROMPT = re.compile(r"The passkey is (\d{5})\. Remember this number\.")


@dataclass
class PasskeyDoc:
    text: str
    tokens: np.ndarray
    passkey: int
    M: int
    N: int
    insertion_index: int

    def parse_passkey(self) -> int:
        found = _KEY_IN_PROMPT.findall(self.text)
        if len(found) != 1:
            raise ValueError(f"expected exactly one key sentence, found {len(found)}")
        return int(found[0])


def passkey_gen(M: int, N: int, seed: int = 0, tokenizer: Optional[ByteTokenizer] = None,
                passkey: Optional[int] = None) -> PasskeyDoc:
    """Filler x M, key sentence, filler x N, question stem."""
    if M < 0 or N < 0:
        raise ConfigError("filler repetition counts must be >= 0")
    tokenizer = tokenizer or ByteTokenizer()
    if passkey is None:
        passkey = int(np.random.default_rng(seed).integers(10000, 100000))
    if not 10000 <= passkey <= 99999:
        raise ConfigError(f"passkey must have 5 digits, got {passkey}")
    before = " ".join([FILLER] * M)
    after = " ".join([FILLER] * N)
    key = KEY_TEMPLATE.format(key=passkey)
    parts = [p for p in (before, key, after, QUESTION) if p]
    text = "\n".join(parts)
    prefix = (before + "\n") if before else ""
    insertion = len(tokenizer.encode(prefix))
    return PasskeyDoc(text, tokenizer.encode(text), passkey, M, N, insertion)


def first_five_digit(text: str) -> Optional[int]:
    m = _FIVE_DIGITS.search(text)
    return int(m.group()) if m else None


def passkey_score(generated: str, doc: PasskeyDoc) -> bool:
    return first_five_digit(generated) == doc.passkey


def oracle_retriever(doc: PasskeyDoc) -> str:
    """Rule-based answer read straight from the prompt text."""
    return f" {doc.parse_passkey()}."


def greedy_generate(model: DecoderModel, prompt, n_new: int,
                    policy: EvictionPolicy = EvictionPolicy()) -> np.ndarray:
    cache = KVCache(model, policy)
    logits = None
    for t in prompt:
        logits = decode_step(model, cache, int(t))
    out = []
    for _ in range(n_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = decode_step(model, cache, nxt)
    return np.array(out, dtype=np.int64)


def model_retriever(model: DecoderModel, n_new: int = 8,
                    tokenizer: Optional[ByteTokenizer] = None) -> Callable[[PasskeyDoc], str]:
    tokenizer = tokenizer or ByteTokenizer()

    def answer(doc: PasskeyDoc) -> str:
        return tokenizer.decode(greedy_generate(model, doc.tokens, n_new))

    return answer


def passkey_accuracy(retriever: Callable[[PasskeyDoc], str], M: int, N: int, trials: int,
                     seed: int = 0) -> float:
    hits = 0
    for t in range(trials):
        doc = passkey_gen(M, N, seed=seed * 1_000_003 + t)
        hits += passkey_score(retriever(doc), doc)
    return hits / trials


# ---------------------------------------------------------------- attention sinks

@dataclass
class SinkMassReport:
    per_head: np.ndarray  # (n_layers, n_heads)
    aggregate: float


def sink_mass(model: DecoderModel, tokens, g: int, mode: Optional[AttnMode] = None) -> SinkMassReport:
    """Mean attention probability on keys < g, averaged over queries >= g."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if not 0 <= g < tokens.size:
        raise ConfigError(f"need 0 <= g < N, got g={g}, N={tokens.size}")
    cfg = model.config
    if g == 0:
        return SinkMassReport(np.zeros((cfg.n_layers, cfg.n_heads)), 0.0)
    record: list = []
    forward(model, tokens, mode or AttnMode.full(cfg.n_heads), record=record)
    per_head = np.stack([probs[:, g:, :g].sum(axis=-1).mean(axis=-1) for probs in record])
    per_head = np.clip(per_head, 0.0, 1.0)
    return SinkMassReport(per_head, float(per_head.mean()))


# ---------------------------------------------------------------- cached decoding quality

def teacher_forced_logits(model: DecoderModel, tokens, policy: EvictionPolicy) -> tuple[np.ndarray, KVCache]:
    cache = KVCache(model, policy)
    logits = np.stack([decode_step(model, cache, int(t)) for t in tokens])
    return logits, cache


def kl_divergence(ref_logits: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """KL(ref || other) per row, computed from logits."""
    ref = log_softmax_np(ref_logits)
    other = log_softmax_np(logits)
    return np.maximum((np.exp(ref) * (ref - other)).sum(axis=-1), 0.0)


def copy_accuracy(model: DecoderModel, task, policy: EvictionPolicy, n_prompts: int,
                  seed: int = 0) -> float:
    """Greedy-decode the echoed prefix of ``task`` samples under ``policy``; token accuracy."""
    rng = np.random.default_rng(seed)
    hits = 0
    total = 0
    for _ in range(n_prompts):
        seq = task.sample(rng)
        prompt, answer = seq[:task.prompt_len], seq[task.prompt_len:]
        out = greedy_generate(model, prompt, answer.size, policy)
        hits += int((out == answer).sum())
        total += answer.size
    return hits / total
