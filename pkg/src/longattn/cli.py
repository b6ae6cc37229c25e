"""Experiment runner: ``longattn {train,eval-ppl,passkey,kv-bench,mask-dump}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 NaN/Inf.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt
from .config import ExperimentConfig
from .data import ByteCorpus, CopyTask, TopicChainTask, batch_for_step
from .errors import ConfigError, NumericalError
from .eval import (ByteTokenizer, copy_accuracy, kl_divergence, model_retriever, oracle_retriever,
                   passkey_accuracy, passkey_gen, perplexity, teacher_forced_logits)
from .kvcache import KVCache, cache_stats, decode_step
from .lora import TrainabilityPolicy, attach_lora
from .model import AdamW, AttnMode, init_model, lr_at, train_step
from .patterns import PatternKind, PatternSpec

log = logging.getLogger("longattn")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.ckpt"


def _map(fn, items, threads: int) -> list:
    """Ordered map; results come back in input order whatever the thread count."""
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def make_task(cfg: ExperimentConfig):
    t = cfg.train
    if t.task == "topic_chain":
        task = TopicChainTask(seq_len=t.seq_len)
    elif t.task == "copy":
        task = CopyTask()
    else:
        task = ByteCorpus.from_file(t.text_path, t.seq_len)
    if task.vocab_needed > cfg.model.vocab_size:
        raise ConfigError(f"task {t.task!r} needs vocab {task.vocab_needed}, model has {cfg.model.vocab_size}")
    return task


def _load_model(cfg: ExperimentConfig, path):
    return ckpt.load(path, expected_config=cfg.model).model


def _model_or_init(cfg: ExperimentConfig, path):
    return _load_model(cfg, path) if path else init_model(cfg.model)


# ---------------------------------------------------------------- commands

def cmd_train(cfg: ExperimentConfig, out: Path, checkpoint: Optional[str] = None, threads: int = 1) -> Path:
    """Train from scratch, fine-tune from ``train.init_checkpoint``, or resume from ``checkpoint``.

    Live weights and optimizer moments are rounded to checkpoint precision
    after every step, so resuming from a saved checkpoint replays the
    uninterrupted run exactly.
    """
    task = make_task(cfg)
    mode = cfg.attention.build(cfg.model.n_heads)
    mode.validate_for(task.seq_len - 1, cfg.model.n_heads)
    t = cfg.train
    if checkpoint:
        state = ckpt.load(checkpoint, expected_config=cfg.model)
        model, opt = state.model, state.optimizer or AdamW()
        start = int(state.state.get("step", 0))
        log.info("resuming at step %d from %s", start, checkpoint)
    else:
        model = _load_model(cfg, t.init_checkpoint) if t.init_checkpoint else init_model(cfg.model)
        if cfg.lora.enabled:
            policy = TrainabilityPolicy(embeddings=cfg.lora.train_embeddings, norms=cfg.lora.train_norms)
            attach_lora(model, cfg.lora.targets, cfg.lora.r, cfg.lora.alpha, policy, seed=t.seed)
        opt = AdamW()
        start = 0
    ckpt.round_to_storage(model, opt)

    def save(step):
        ckpt.save(out / CHECKPOINT_NAME, model, opt, {"step": step, "seed": t.seed})

    rows = []
    began = time.perf_counter()
    for step in range(start, t.steps):
        lr = lr_at(step, t.lr, t.warmup)
        loss = train_step(model, batch_for_step(task, t.seed, step, t.batch), mode, opt, lr)
        if not math.isfinite(loss):
            raise NumericalError(f"loss is {loss} at step {step}")
        ckpt.round_to_storage(model, opt)
        rows.append((step, repr(loss), repr(lr), int((time.perf_counter() - began) * 1000)))
        if t.checkpoint_every and (step + 1) % t.checkpoint_every == 0:
            save(step + 1)
    _write_csv(out / "loss.csv", ["step", "loss", "lr", "wallclock_ms"], rows)
    save(max(start, t.steps))
    return out / CHECKPOINT_NAME


def cmd_eval_ppl(cfg: ExperimentConfig, out: Path, checkpoint: Optional[str], text_path: Optional[str],
                 threads: int = 1) -> list:
    path = text_path or cfg.eval.text_path
    if not path:
        raise ConfigError("eval-ppl needs --text or eval.text_path")
    tokens = ByteTokenizer().encode(Path(path).read_text(encoding="utf-8"))
    model = _model_or_init(cfg, checkpoint)
    mode = AttnMode.full(cfg.model.n_heads)
    reports = [perplexity(model, tokens, c, min(cfg.eval.stride, c), mode, threads)
               for c in cfg.eval.context_lengths]
    ppls = [r.perplexity for r in reports]
    monotone = all(b <= a for a, b in zip(ppls, ppls[1:]))
    log.info("perplexity by context length %s: %s (non-increasing: %s)",
             cfg.eval.context_lengths, [round(p, 4) for p in ppls], monotone)
    lines = "".join(r.to_json() + "\n" for r in reports)
    (out / "ppl.jsonl").write_text(lines)
    sys.stdout.write(lines)
    return reports


def cmd_passkey(cfg: ExperimentConfig, out: Path, checkpoint: Optional[str], threads: int = 1) -> list:
    e = cfg.eval
    if e.retriever == "oracle":
        retriever = oracle_retriever
    else:
        if cfg.model.vocab_size < ByteTokenizer.vocab_size:
            raise ConfigError("passkey documents are byte-tokenised; model vocab must be >= 256")
        retriever = model_retriever(_model_or_init(cfg, checkpoint))
    grid = [(m, n) for m in e.passkey_m for n in e.passkey_n]
    limit = cfg.model.max_positions * cfg.model.pos_interp_factor
    for m, n in grid:
        if e.retriever == "model" and passkey_gen(m, n).tokens.size + 8 > limit:
            raise ConfigError(f"passkey document M={m}, N={n} exceeds the model's position range")

    def cell(mn):
        m, n = mn
        acc = passkey_accuracy(retriever, m, n, e.passkey_trials, seed=cfg.train.seed)
        return m, n, passkey_gen(m, n).tokens.size, acc

    rows = _map(cell, grid, threads)
    _write_csv(out / "passkey.csv", ["M", "N", "doc_len", "accuracy"], rows)
    return rows


def _prompt_set(cfg: ExperimentConfig):
    rng = np.random.default_rng(cfg.train.seed)
    if cfg.cache.prompt_task == "copy":
        task = CopyTask()
    else:
        task = TopicChainTask(seq_len=cfg.train.seq_len)
    if task.vocab_needed > cfg.model.vocab_size:
        raise ConfigError(f"prompt task needs vocab {task.vocab_needed}, model has {cfg.model.vocab_size}")
    return task, [task.sample(rng) for _ in range(cfg.cache.prompts)]


def kv_bench_rows(model, cfg: ExperimentConfig, prompts, threads: int = 1) -> list:
    """One row per (policy, budget, step), averaged over prompts."""
    c = cfg.cache
    length = prompts[0].size
    refs = [teacher_forced_logits(model, p, c.policy("full", 0))[0] for p in prompts]
    grid = [(kind, pct) for kind in c.policies for pct in ([100] if kind == "full" else c.budget_pcts)]

    def cell(kp):
        kind, pct = kp
        policy = c.policy(kind, max(1, math.ceil(length * pct / 100)))
        sizes = np.zeros(length)
        mass = np.zeros(length)
        div = np.zeros(length)
        for prompt, ref in zip(prompts, refs):
            cache = KVCache(model, policy)
            for step, tok in enumerate(prompt):
                logits = decode_step(model, cache, int(tok))
                st = cache_stats(cache)
                total = st.retained_score_mass + sum(hc.evicted_mass for lh in cache.heads for hc in lh)
                sizes[step] += cache.sizes().max()
                mass[step] += st.retained_score_mass / total
                div[step] += kl_divergence(ref[step], logits)
        k = len(prompts)
        return [(kind, pct, s, int(round(sizes[s] / k)), round(mass[s] / k, 10), round(div[s] / k, 12))
                for s in range(length)]

    return [row for rows in _map(cell, grid, threads) for row in rows]


def cmd_kv_bench(cfg: ExperimentConfig, out: Path, checkpoint: Optional[str], threads: int = 1) -> list:
    model = _model_or_init(cfg, checkpoint)
    task, prompts = _prompt_set(cfg)
    rows = kv_bench_rows(model, cfg, prompts, threads)
    _write_csv(out / "kv_bench.csv",
               ["policy", "budget_pct", "step", "cache_size", "retained_mass", "logit_divergence_vs_full"], rows)
    if cfg.cache.prompt_task == "copy":
        acc_rows = []
        for kind in cfg.cache.policies:
            for pct in [100] if kind == "full" else cfg.cache.budget_pcts:
                policy = cfg.cache.policy(kind, max(1, math.ceil(task.seq_len * pct / 100)))
                acc_rows.append((kind, pct, copy_accuracy(model, task, policy, cfg.cache.prompts,
                                                          seed=cfg.train.seed)))
        _write_csv(out / "kv_accuracy.csv", ["policy", "budget_pct", "copy_accuracy"], acc_rows)
    return rows


def cmd_mask_dump(spec: PatternSpec, n: int, out: Path) -> tuple[Path, Path]:
    mask = spec.build(n)
    stem = out / f"mask_{spec.kind.value}_n{n}"
    pgm, edges = stem.with_suffix(".pgm"), stem.with_suffix(".csv")
    pgm.write_text(mask.to_pgm())
    edges.write_text(mask.to_csv())
    return pgm, edges


# ---------------------------------------------------------------- argument handling

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults fill missing fields)")
    common.add_argument("--checkpoint", help="checkpoint to load (train: resume from it)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for grid sweeps")

    p = argparse.ArgumentParser(prog="longattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train or fine-tune a toy model")
    ev = sub.add_parser("eval-ppl", parents=[common], help="sliding-window perplexity on a text file")
    ev.add_argument("--text", help="UTF-8 text file (overrides eval.text_path)")
    sub.add_parser("passkey", parents=[common], help="passkey retrieval accuracy grid")
    sub.add_parser("kv-bench", parents=[common], help="KV-cache eviction sweep")
    md = sub.add_parser("mask-dump", parents=[common], help="write a mask as PGM and CSV")
    md.add_argument("--kind", default=None, choices=[k.value for k in PatternKind],
                    help="pattern kind (default: attention.kind from the config)")
    md.add_argument("--n", type=int, default=16)
    md.add_argument("--group-size", type=int)
    md.add_argument("--num-sink", type=int)
    md.add_argument("--stride", type=int)
    md.add_argument("--random-k", type=int)
    md.add_argument("--pattern-seed", type=int)
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    cfg.validate()
    return cfg


def _mask_spec(args, cfg: ExperimentConfig) -> PatternSpec:
    a = cfg.attention
    kind = args.kind or a.kind
    if kind not in [k.value for k in PatternKind]:
        raise ConfigError(f"mask-dump needs a single pattern kind, got {kind!r}")

    def pick(value, default):
        return default if value is None else value

    return PatternSpec(PatternKind(kind), pick(args.group_size, a.group_size), pick(args.num_sink, a.num_sink),
                       pick(args.stride, a.stride), pick(args.random_k, a.random_k),
                       pick(args.pattern_seed, a.seed))


def run(args) -> None:
    cfg = resolve_config(args)
    out = Path(cfg.output_dir)
    if args.command == "mask-dump":
        spec = _mask_spec(args, cfg)
        spec.build(args.n)  # validate before touching the filesystem
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    if args.command == "train":
        cmd_train(cfg, out, args.checkpoint, args.threads)
    elif args.command == "eval-ppl":
        cmd_eval_ppl(cfg, out, args.checkpoint, args.text, args.threads)
    elif args.command == "passkey":
        cmd_passkey(cfg, out, args.checkpoint, args.threads)
    elif args.command == "kv-bench":
        cmd_kv_bench(cfg, out, args.checkpoint, args.threads)
    else:
        cmd_mask_dump(spec, args.n, out)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
