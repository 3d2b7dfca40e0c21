"""Simulated multi-rank training and full-length evaluation.

Each optimizer step draws ``world_size * batch_size`` records, gives every
simulated rank its own slice, optionally shortens histories with stochastic
length (plain or load-balanced), runs forward and backward per rank, and
averages the rank gradients in rank order before one Adam update.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import load_checkpoint, save_checkpoint
from ..dataset import Record, chronological_split, labels_matrix, read_jsonl
from ..errors import ConfigError, TrainingDivergedError
from ..metrics_scaling import flops_model, normalized_entropy
from ..sequence_input import (
    EmbeddingTables,
    LbslParams,
    balance_ratio,
    embedding_backward,
    encode_batch,
    init_lbsl,
    lbsl_step,
    rank_load,
    rank_rng,
    standard_sl,
)
from ..topology import ModelConfig, bce_loss, init_params, model_backward, model_forward
from .config import TrainConfig, write_toml
from .kuairand import KuaiRandSchema, ingest_kuairand
from .optim import Adam
from .synthetic import generate_synthetic

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "task", "split", "ne", "train_flop", "infer_flop", "balance_ratio")
EMB_PREFIX = "emb/"


# ---------------------------------------------------------------------------
# data


def load_records(cfg: TrainConfig) -> tuple[list, dict]:
    """Records plus vocabulary sizes for the configured source."""
    data = cfg.data
    if data.source == "synthetic":
        spec = data.synthetic_spec
        records = generate_synthetic(spec, cfg.seed)
        vocab = {"item": spec.item_vocab, "action": spec.action_vocab}
    elif data.source == "jsonl":
        records = read_jsonl(data.path)
        vocab = _infer_vocab(records)
    else:
        schema = KuaiRandSchema.from_dict(data.schema) if data.schema else KuaiRandSchema()
        records, report = ingest_kuairand(data.path, schema)
        vocab = {"item": max(len(report.item_index), 1), "action": max(schema.actions.values()) + 1}
    if data.max_length is not None:
        records = [_cap_history(r, data.max_length) for r in records]
    return records, vocab


def _infer_vocab(records) -> dict:
    items = [i for r in records for i in list(r.items) + list(r.candidates)]
    actions = [a for r in records for s in r.actions for a in s]
    out = {"item": max(items, default=0) + 1, "action": max(actions, default=0) + 1}
    ctx = [c for r in records for c in r.context]
    if ctx:
        out["context"] = max(ctx) + 1
    return out


def _cap_history(r: Record, n: int) -> Record:
    if len(r.items) <= n:
        return r
    return Record(r.user_id, r.items[-n:], r.actions[-n:], r.timestamps[-n:], r.candidates, r.labels,
                  r.request_time, r.context)


def branch_history(record: Record, source: str) -> list:
    """History positions a branch reads: all of them, or those carrying one action."""
    if source in ("main", "all"):
        return list(range(len(record.items)))
    if source.startswith("action:"):
        a = int(source.split(":", 1)[1])
        return [i for i, acts in enumerate(record.actions) if a in acts]
    raise ConfigError(f"unknown branch source {source!r}; use 'all' or 'action:<id>'")


# ---------------------------------------------------------------------------
# model plumbing


def init_model(cfg: TrainConfig, vocab: dict) -> dict:
    rng = np.random.default_rng([cfg.seed, 0])
    dtype = np.dtype(cfg.numerics.dtype)
    mcfg = cfg.resolved_model
    params = init_params(mcfg, rng, cfg.init_std, dtype)
    tables = EmbeddingTables.init(vocab["item"], vocab["action"], mcfg.d, rng, vocab.get("context", 0),
                                  std=cfg.init_std, dtype=dtype)
    for name, table in tables.named().items():
        params[EMB_PREFIX + name] = table
    return params


def tables_of(params: dict) -> EmbeddingTables:
    return EmbeddingTables(params["emb/item"], params["emb/action"], params.get("emb/context"))


@dataclass
class BatchResult:
    loss: float
    probs: np.ndarray
    labels: np.ndarray
    grads: dict | None = None


def run_batch(params, mcfg: ModelConfig, records, keeps=None, backward=True, weights=None) -> BatchResult:
    """Forward (and optionally backward) over records; ``keeps[i]`` restricts history positions."""
    tables = tables_of(params)
    inputs, flags, lookups = {}, {}, {}
    for branch in mcfg.branches:
        key = branch.key
        if key in inputs:
            continue
        seqs = []
        for i, r in enumerate(records):
            pos = branch_history(r, key)
            if keeps is not None and keeps[i] is not None:
                kept = set(keeps[i].tolist())
                pos = [p for p in pos if p in kept]
            seqs.append(r.to_sequence(pos))
        inputs[key], flags[key], lookups[key] = encode_batch(seqs, tables)
    if not mcfg.fused:
        key = mcfg.branches[0].key
        inputs, flags = inputs[key], flags[key]
    probs, cache = model_forward(params, mcfg, inputs, flags)
    labels = labels_matrix(records)
    loss, dlogits = bce_loss(cache.logits, labels, mcfg.weights if weights is None else weights)
    if not backward:
        return BatchResult(loss, probs, labels)
    grads, dinputs = model_backward(dlogits, cache, params, mcfg)
    for key, dx in dinputs.items():
        for name, g in embedding_backward(dx, lookups[key], tables).items():
            full = EMB_PREFIX + name
            grads[full] = grads[full] + g if full in grads else g
    return BatchResult(loss, probs, labels, grads)


# ---------------------------------------------------------------------------
# stochastic length per step


class LengthSampler:
    def __init__(self, cfg: TrainConfig, max_history: int):
        self.cfg = cfg
        sl = cfg.sl
        self.state = None
        if sl.enabled and sl.mode == "global":
            l_sl = sl.l_sl if sl.l_sl is not None else int(round(max(max_history, 1) ** (sl.alpha / 2.0)))
            self.params = LbslParams(sl.world_size, sl.warmup_steps, sl.recal_interval, sl.gamma, sl.alpha,
                                     max(l_sl, 1), cfg.data.batch_size, cfg.seed)
            self.state = init_lbsl(self.params)

    def __call__(self, step: int, rank_records: list):
        """Per-rank lists of kept history indices (``None`` = keep all) and realized loads."""
        sl, gamma = self.cfg.sl, self.cfg.sl.gamma
        hist = [[len(r.items) for r in recs] for recs in rank_records]
        if not sl.enabled:
            return [[None] * len(h) for h in hist], [rank_load(h, gamma) for h in hist]
        if sl.mode == "per_user":
            keeps = []
            for rank, h in enumerate(hist):
                rng = rank_rng(self.cfg.seed, rank, step)
                keeps.append([standard_sl(n, sl.alpha, rng, "per_user") for n in h])
            return keeps, [rank_load([k.size for k in ks], gamma) for ks in keeps]
        decisions = lbsl_step(self.state, hist, workers=sl.workers, balanced=sl.lbsl)
        return [d.kept for d in decisions], [d.realized_load for d in decisions]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: dict
    metrics: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    out_dir: Path | None = None
    eval_ne: dict = field(default_factory=dict)


class FlopCache:
    def __init__(self, mcfg: ModelConfig):
        self.mcfg = mcfg
        self._memo = {}

    def example(self, record: Record, keep=None) -> float:
        lengths = {}
        for b in self.mcfg.branches:
            pos = branch_history(record, b.key)
            if keep is not None:
                kept = set(keep.tolist())
                pos = [p for p in pos if p in kept]
            lengths[b.key] = len(pos) + len(record.candidates) + len(record.context)
        key = tuple(sorted(lengths.items())) + (len(record.candidates),)
        if key not in self._memo:
            self._memo[key] = flops_model(self.mcfg, lengths, len(record.candidates)).inference
        return self._memo[key]


def _ne_per_task(labels, probs, tasks):
    out = {}
    for t in tasks:
        try:
            out[t] = normalized_entropy(labels[:, t], probs[:, t])
        except ValueError:
            out[t] = float("nan")
    return out


def evaluate_records(params, mcfg: ModelConfig, records, tasks=None, batch_size: int = 256):
    """Full-length inference (no sampling). Returns ``(ne per task, probs, labels)``."""
    tasks = list(range(mcfg.task_count)) if tasks is None else list(tasks)
    bad = [t for t in tasks if not 0 <= t < mcfg.task_count]
    if bad:
        raise ConfigError(f"tasks {bad} not produced by a {mcfg.task_count}-task model")
    probs, labels = [], []
    for i in range(0, len(records), batch_size):
        res = run_batch(params, mcfg, records[i : i + batch_size], backward=False)
        probs.append(res.probs)
        labels.append(res.labels)
    probs = np.concatenate(probs) if probs else np.zeros((0, mcfg.task_count))
    labels = np.concatenate(labels) if labels else np.zeros((0, mcfg.task_count))
    return _ne_per_task(labels, probs, tasks), probs, labels


def _dump_batch(out_dir, step, rank, records):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diverged_step{step}_rank{rank}.json"
    path.write_text(json.dumps({"step": step, "rank": rank, "user_ids": [r.user_id for r in records]}))
    return str(path)


def train(cfg: TrainConfig, out_dir=None, records=None, vocab=None, params=None, log_every: int = 0) -> TrainResult:
    """Train per ``cfg``; writes metrics, checkpoint and resolved config under ``out_dir`` if given."""
    if records is None:
        records, vocab = load_records(cfg)
    elif vocab is None:
        vocab = _infer_vocab(records)
    train_set, eval_set = chronological_split(records, cfg.eval.split)
    if not train_set:
        raise ConfigError("training split is empty")
    mcfg = cfg.resolved_model
    if params is None:
        params = init_model(cfg, vocab)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_toml(cfg.to_dict(), out / "config.resolved.toml")

    R, b = cfg.sl.world_size, cfg.data.batch_size
    opt = Adam(cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    sampler = LengthSampler(cfg, max(len(r.items) for r in train_set))
    flops = FlopCache(mcfg)
    order_rng = np.random.default_rng([cfg.seed, 1])
    order = order_rng.permutation(len(train_set))
    cursor = 0
    tasks = cfg.eval.tasks if cfg.eval.tasks is not None else list(range(mcfg.task_count))
    result = TrainResult(params, out_dir=out)
    window_probs, window_labels, window_ratio, window_flop = [], [], [], []
    pool = ThreadPoolExecutor(cfg.sl.workers) if cfg.sl.workers > 1 and R > 1 else None

    def next_records(n):
        nonlocal cursor, order
        idx = []
        while len(idx) < n:
            if cursor == len(order):
                order = order_rng.permutation(len(train_set))
                cursor = 0
            take = min(n - len(idx), len(order) - cursor)
            idx.extend(order[cursor : cursor + take].tolist())
            cursor += take
        return [train_set[i] for i in idx]

    try:
        for step in range(1, cfg.data.steps + 1):
            batch = next_records(R * b)
            rank_records = [batch[r * b : (r + 1) * b] for r in range(R)]
            keeps, loads = sampler(step, rank_records)

            def work(r):
                return run_batch(params, mcfg, rank_records[r], keeps[r])

            results = list(pool.map(work, range(R))) if pool else [work(r) for r in range(R)]
            for r, res in enumerate(results):
                if not np.isfinite(res.loss):
                    dump = _dump_batch(out, step, r, rank_records[r])
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} on rank {r}", batch_id=(step, r), dump_path=dump
                    )
            # all-reduce: mean over ranks in rank order
            grads = {}
            for res in results:
                for k, g in res.grads.items():
                    grads[k] = grads[k] + g if k in grads else g.copy()
            for k in grads:
                grads[k] /= R
            opt.step(params, grads)

            loss = float(np.mean([res.loss for res in results]))
            result.losses.append(loss)
            for res in results:
                window_probs.append(res.probs)
                window_labels.append(res.labels)
            window_ratio.append(balance_ratio(loads) if min(loads) > 0 else float("nan"))
            window_flop.extend(3.0 * flops.example(rec, k) for recs, ks in zip(rank_records, keeps)
                               for rec, k in zip(recs, ks))
            if log_every and step % log_every == 0:
                log.info("step %d loss %.5f", step, loss)

            if step % cfg.eval.interval == 0 or step == cfg.data.steps:
                train_ne = _ne_per_task(np.concatenate(window_labels), np.concatenate(window_probs), tasks)
                infer_flop = float(np.mean([flops.example(r) for r in eval_set])) if eval_set else float("nan")
                row_common = {"train_flop": float(np.mean(window_flop)), "infer_flop": infer_flop,
                              "balance_ratio": float(np.nanmean(window_ratio)) if R > 1 else 1.0}
                for t in tasks:
                    result.metrics.append({"step": step, "task": t, "split": "train", "ne": train_ne[t], **row_common})
                if eval_set:
                    eval_ne, _, _ = evaluate_records(params, mcfg, eval_set, tasks, cfg.eval.batch_size)
                    result.eval_ne = eval_ne
                    for t in tasks:
                        result.metrics.append({"step": step, "task": t, "split": "eval", "ne": eval_ne[t],
                                               **row_common})
                window_probs, window_labels, window_ratio, window_flop = [], [], [], []
    finally:
        if pool:
            pool.shutdown()

    if out is not None:
        write_metrics(result.metrics, out / "metrics.csv")
        save_checkpoint(out / "checkpoint.bin", params,
                        {"config": cfg.to_dict(), "vocab": vocab, "step": cfg.data.steps})
        with open(out / "fit_points.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "compute", "metric", "task"])
            final = [m for m in result.metrics if m["step"] == cfg.data.steps and m["split"] == "eval"]
            for m in final:
                w.writerow([f"seed{cfg.seed}", m["train_flop"], m["ne"], m["task"]])
    return result


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in METRIC_COLUMNS})


def evaluate(checkpoint, records, tasks=None, batch_size: int = 256) -> dict:
    """Per-task NE and mean per-example FLOPs of a saved model on ``records``."""
    params, meta = load_checkpoint(checkpoint)
    cfg = TrainConfig.from_dict(meta["config"])
    mcfg = cfg.resolved_model
    params = {k: np.array(v) for k, v in params.items()}
    ne, probs, _ = evaluate_records(params, mcfg, records, tasks, batch_size)
    flops = FlopCache(mcfg)
    per_example = [flops.example(r) for r in records]
    lengths = [len(r.items) + len(r.candidates) for r in records]
    report = flops_model(mcfg, int(round(np.mean(lengths))) if lengths else 0)
    return {"ne": ne, "infer_flop": float(np.mean(per_example)) if per_example else 0.0,
            "train_flop": 3.0 * float(np.mean(per_example)) if per_example else 0.0,
            "flops_at_mean_length": report.to_dict(), "n_examples": len(records), "probs": probs}
