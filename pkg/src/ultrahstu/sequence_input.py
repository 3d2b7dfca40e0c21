"""Input sequences: item+action merging, stochastic length, and load balancing.

Each event contributes a single row ``item_emb + sum(action_emb)``; ranking
candidates sit at the tail with their action contribution forced to zero so
labels cannot leak into the input.

Stochastic length (SL) leaves a user's history intact with probability
``p_u`` and otherwise truncates it to a random order-preserving subset.
Load-balanced SL (LBSL) replaces those independent coin flips, per rank,
with a weighted draw plus greedy fill against a shared target load so that
ranks in a synchronous step finish at about the same time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, StateError, VocabularyError
from .jagged import JaggedBatch, offsets_from_lengths


@dataclass
class EventSequence:
    item_ids: list
    action_sets: list
    is_candidate: list
    timestamps: list = None
    context_ids: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.item_ids)
        if self.timestamps is None:
            self.timestamps = list(range(n))
        if not (len(self.action_sets) == len(self.is_candidate) == len(self.timestamps) == n):
            raise DimensionError("item_ids, action_sets, is_candidate and timestamps must share a length")
        flags = [bool(c) for c in self.is_candidate]
        first = flags.index(True) if True in flags else n
        if not all(flags[first:]):
            raise DomainError("candidates must form a contiguous suffix")

    def __len__(self):
        return len(self.item_ids)

    @property
    def n_candidates(self) -> int:
        return int(sum(bool(c) for c in self.is_candidate))

    @property
    def history_length(self) -> int:
        return len(self) - self.n_candidates

    def subset(self, keep) -> "EventSequence":
        keep = list(keep)
        return EventSequence(
            [self.item_ids[i] for i in keep],
            [self.action_sets[i] for i in keep],
            [self.is_candidate[i] for i in keep],
            [self.timestamps[i] for i in keep],
            list(self.context_ids),
        )


@dataclass
class EmbeddingTables:
    item: np.ndarray
    action: np.ndarray
    context: np.ndarray | None = None

    def __post_init__(self):
        for name, table in self.named().items():
            if table.ndim != 2 or table.shape[0] == 0:
                raise DimensionError(f"{name} table must be a non-empty 2-D array")
            if not np.all(np.isfinite(table)):
                raise DomainError(f"{name} table has non-finite entries")

    @property
    def d(self) -> int:
        return self.item.shape[1]

    @classmethod
    def init(cls, item_vocab, action_vocab, d, rng, context_vocab=0, std=0.02, dtype=np.float64):
        context = rng.normal(0, std, (context_vocab, d)).astype(dtype) if context_vocab else None
        return cls(
            rng.normal(0, std, (item_vocab, d)).astype(dtype),
            rng.normal(0, std, (action_vocab, d)).astype(dtype),
            context,
        )

    def named(self) -> dict:
        out = {"item": self.item, "action": self.action}
        if self.context is not None:
            out["context"] = self.context
        return out


def _check_ids(ids, table, name):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])]
        raise VocabularyError(f"{name} ids {sorted(set(bad.tolist()))[:5]} outside vocabulary of {table.shape[0]}")
    return ids


def action_embedding(action_set, tables: EmbeddingTables) -> np.ndarray:
    """Multi-hot action vector: one row per distinct action type, summed."""
    ids = _check_ids(sorted(set(action_set)), tables.action, "action")
    return tables.action[ids].sum(axis=0) if ids.size else np.zeros(tables.d, tables.action.dtype)


def merge_item_action(seq: EventSequence, tables: EmbeddingTables) -> np.ndarray:
    """``(L, d)`` rows ``item + actions``; candidate rows carry the item only."""
    items = _check_ids(seq.item_ids, tables.item, "item")
    out = tables.item[items].copy()
    for j, (actions, cand) in enumerate(zip(seq.action_sets, seq.is_candidate)):
        if not cand:
            out[j] += action_embedding(actions, tables)
    return out


@dataclass
class EmbeddingLookup:
    """Index bookkeeping needed to send row gradients back to the tables."""

    item_rows: np.ndarray
    item_ids: np.ndarray
    action_rows: np.ndarray
    action_ids: np.ndarray
    context_rows: np.ndarray
    context_ids: np.ndarray


def encode_batch(seqs: Sequence[EventSequence], tables: EmbeddingTables):
    """Embed many sequences into one jagged batch.

    Context ids, when present, become extra rows at the head of their
    sequence. Returns ``(batch, is_candidate, lookup)``.
    """
    lengths, is_cand = [], []
    item_rows, item_ids, act_rows, act_ids, ctx_rows, ctx_ids = [], [], [], [], [], []
    row = 0
    for seq in seqs:
        n_ctx = len(seq.context_ids)
        ctx_rows.extend(range(row, row + n_ctx))
        ctx_ids.extend(seq.context_ids)
        row += n_ctx
        is_cand.extend([False] * n_ctx)
        for j in range(len(seq)):
            item_rows.append(row)
            item_ids.append(seq.item_ids[j])
            if not seq.is_candidate[j]:
                for a in sorted(set(seq.action_sets[j])):
                    act_rows.append(row)
                    act_ids.append(a)
            is_cand.append(bool(seq.is_candidate[j]))
            row += 1
        lengths.append(n_ctx + len(seq))
    lookup = EmbeddingLookup(
        np.asarray(item_rows, np.int64),
        _check_ids(item_ids, tables.item, "item"),
        np.asarray(act_rows, np.int64),
        _check_ids(act_ids, tables.action, "action"),
        np.asarray(ctx_rows, np.int64),
        np.asarray(ctx_ids, np.int64),
    )
    if lookup.context_ids.size:
        if tables.context is None:
            raise VocabularyError("sequences carry context ids but there is no context table")
        _check_ids(lookup.context_ids, tables.context, "context")
    values = np.zeros((row, tables.d), dtype=tables.item.dtype)
    values[lookup.item_rows] = tables.item[lookup.item_ids]
    np.add.at(values, lookup.action_rows, tables.action[lookup.action_ids])
    if lookup.context_ids.size:
        values[lookup.context_rows] = tables.context[lookup.context_ids]
    return JaggedBatch(values, offsets_from_lengths(lengths)), np.asarray(is_cand, bool), lookup


def embedding_backward(dvalues: np.ndarray, lookup: EmbeddingLookup, tables: EmbeddingTables) -> dict:
    """Scatter row gradients into dense table gradients."""
    grads = {"item": np.zeros_like(tables.item), "action": np.zeros_like(tables.action)}
    np.add.at(grads["item"], lookup.item_ids, dvalues[lookup.item_rows])
    np.add.at(grads["action"], lookup.action_ids, dvalues[lookup.action_rows])
    if tables.context is not None:
        grads["context"] = np.zeros_like(tables.context)
        np.add.at(grads["context"], lookup.context_ids, dvalues[lookup.context_rows])
    return grads


# ---------------------------------------------------------------------------
# stochastic length


def sl_target_length(n_u: int, alpha: float, mode: str = "global", l_sl: int | None = None) -> int:
    if mode == "per_user":
        return min(n_u, int(round(n_u ** (alpha / 2.0)))) if n_u > 0 else 0
    if mode == "global":
        if l_sl is None:
            raise DomainError("global mode needs l_sl")
        return min(n_u, int(l_sl))
    raise DomainError(f"unknown SL mode {mode!r}")


def standard_sl(
    n_u: int,
    alpha: float,
    rng: np.random.Generator,
    mode: str = "per_user",
    l_sl: int | None = None,
    n_candidates: int = 0,
) -> np.ndarray:
    """Kept indices after truncating a sequence with the SL rule.

    The first ``n_u - n_candidates`` positions are history; a uniformly
    random, order-preserving subset of ``tau`` of them is kept, where ``tau``
    is ``n_hist ** (alpha / 2)`` (``per_user``) or ``l_sl`` (``global``),
    capped at ``n_hist``. The candidate suffix is always kept.
    """
    if n_u < 0:
        raise DomainError(f"n_u must be >= 0, got {n_u}")
    if not 1.0 < alpha <= 2.0:
        raise DomainError(f"alpha must lie in (1, 2], got {alpha}")
    n_hist = n_u - n_candidates
    tau = sl_target_length(n_hist, alpha, mode, l_sl)
    if tau >= n_hist:
        kept = np.arange(n_hist)
    else:
        kept = np.sort(rng.choice(n_hist, size=tau, replace=False))
    return np.concatenate([kept, np.arange(n_hist, n_u)]).astype(np.int64)


def sl_weight(n_u, alpha: float, l_sl: float) -> np.ndarray:
    """Probability of leaving a sequence unsampled: ``min(1, l_sl / n_u) ** (2 - alpha)``.

    Decreasing in ``n_u``; identically 1 at ``alpha = 2``.
    """
    n_u = np.maximum(np.asarray(n_u, dtype=np.float64), 1.0)
    return np.minimum(1.0, l_sl / n_u) ** (2.0 - alpha)


def rank_load(lengths, gamma: float) -> float:
    """Compute load of one rank: ``sum(n_u ** gamma)``."""
    lengths = np.asarray(lengths, dtype=np.float64)
    return float(np.sum(lengths**gamma))


def balance_ratio(loads) -> float:
    loads = np.asarray(loads, dtype=np.float64)
    if loads.size == 0 or np.any(loads <= 0):
        raise DomainError("balance ratio needs strictly positive loads")
    return float(loads.max() / loads.min())


def expected_sl_load(lengths, alpha: float, gamma: float, l_sl: int) -> float:
    """Mean rank load under standard SL, computed before any truncation."""
    n = np.asarray(lengths, dtype=np.float64)
    p = sl_weight(n, alpha, l_sl)
    capped = np.minimum(n, l_sl)
    return float(np.sum(p * n**gamma + (1.0 - p) * capped**gamma))


@dataclass(frozen=True)
class LbslParams:
    world_size: int
    warmup_steps: int
    recal_interval: int
    gamma: float
    alpha: float
    l_sl: int
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        if not 1.0 < self.gamma < 2.0:
            raise DomainError(f"gamma must lie in (1, 2), got {self.gamma}")
        if not 1.0 < self.alpha <= 2.0:
            raise DomainError(f"alpha must lie in (1, 2], got {self.alpha}")
        if self.world_size < 1 or self.batch_size < 1 or self.warmup_steps < 1 or self.recal_interval < 1:
            raise DomainError("world_size, batch_size, warmup_steps and recal_interval must be >= 1")

    @classmethod
    def with_default_l_sl(cls, max_length: int, **kw) -> "LbslParams":
        return cls(l_sl=int(round(max_length ** (kw["alpha"] / 2.0))), **kw)


@dataclass
class LbslState:
    params: LbslParams
    target_load: float = 0.0
    accum: np.ndarray = None
    step: int = 0
    initialized: bool = False

    @property
    def phase(self) -> str:
        return "warmup" if self.step < self.params.warmup_steps else "steady"


def init_lbsl(params: LbslParams) -> LbslState:
    return LbslState(params, 0.0, np.zeros(params.world_size), 0, True)


@dataclass
class RankDecision:
    rank: int
    unsampled: list  # batch positions kept at full length
    kept: list  # per-example kept-index arrays
    raw_load: float
    realized_load: float


def rank_rng(seed: int, rank: int, step: int) -> np.random.Generator:
    """Independent stream per (seed, rank, step), so worker scheduling cannot change draws."""
    return np.random.default_rng([seed, rank, step])


def _sl_rank(lengths, p, params: LbslParams, rng):
    unsampled = [u for u in range(len(lengths)) if rng.random() < p[u]]
    return unsampled


def _lbsl_rank(lengths, p, target, params: LbslParams, rng):
    n = np.asarray(lengths, dtype=np.float64)
    capped = np.minimum(n, params.l_sl)
    # reduces to Algorithm-1 accounting (b * l_sl^gamma base) when every n_u >= l_sl
    base = float(np.sum(capped**params.gamma))
    inc = n**params.gamma - capped**params.gamma
    budget = target - base
    order = rng.choice(n.size, size=n.size, replace=False, p=p / p.sum()) if n.size else []
    chosen, s = [], 0.0
    for u in order:
        if s + inc[u] <= budget:
            chosen.append(int(u))
            s += inc[u]
    return sorted(chosen)


def _decide(rank, lengths, state: LbslState, balanced: bool) -> RankDecision:
    prm = state.params
    rng = rank_rng(prm.seed, rank, state.step)
    p = sl_weight(lengths, prm.alpha, prm.l_sl)
    if balanced:
        unsampled = _lbsl_rank(lengths, p, state.target_load, prm, rng)
    else:
        unsampled = _sl_rank(lengths, p, prm, rng)
    keep_full = set(unsampled)
    kept = []
    for u, n_u in enumerate(lengths):
        if u in keep_full:
            kept.append(np.arange(n_u))
        else:
            kept.append(standard_sl(int(n_u), prm.alpha, rng, mode="global", l_sl=prm.l_sl))
    realized = rank_load([k.size for k in kept], prm.gamma)
    return RankDecision(rank, unsampled, kept, rank_load(lengths, prm.gamma), realized)


def lbsl_step(state: LbslState, per_rank_lengths, workers: int = 1, balanced: bool = True) -> list:
    """Advance LBSL by one synchronous training step.

    ``per_rank_lengths[r]`` lists the raw lengths of rank ``r``'s local batch.
    Warmup steps (and every step when ``balanced=False``) apply plain SL;
    steady steps pick the unsampled set with a weighted permutation and
    greedy fill against the shared target load. The target is the mean
    pre-truncation SL load, set at the end of warmup and refreshed every
    ``recal_interval`` steps. Mutates ``state``.
    """
    if state is None or not state.initialized:
        raise StateError("LBSL state used before init_lbsl()")
    prm = state.params
    if len(per_rank_lengths) != prm.world_size:
        raise DimensionError(f"expected {prm.world_size} rank batches, got {len(per_rank_lengths)}")
    for lengths in per_rank_lengths:
        if len(lengths) != prm.batch_size:
            raise DimensionError(f"every rank batch must hold {prm.batch_size} examples")
    state.step += 1
    t = state.step
    steady = balanced and t > prm.warmup_steps

    def run(r):
        lengths = np.asarray(per_rank_lengths[r], dtype=np.int64)
        state.accum[r] += expected_sl_load(lengths, prm.alpha, prm.gamma, prm.l_sl)
        return _decide(r, lengths, state, steady)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            decisions = list(pool.map(run, range(prm.world_size)))
    else:
        decisions = [run(r) for r in range(prm.world_size)]

    # barrier: in-process all-reduce of the accumulated loads
    if t == prm.warmup_steps:
        state.target_load = float(state.accum.sum()) / (prm.world_size * prm.warmup_steps)
        state.accum[:] = 0.0
    elif t > prm.warmup_steps and t % prm.recal_interval == 0:
        state.target_load = float(state.accum.sum()) / (prm.world_size * prm.recal_interval)
        state.accum[:] = 0.0
    return decisions


def pareto_lengths(rng: np.random.Generator, size, shape: float = 1.5, minimum: int = 64, cap: int = 16384):
    """Integer lengths from a Pareto(shape, minimum) capped at ``cap``."""
    draws = minimum * (1.0 - rng.random(size)) ** (-1.0 / shape)
    return np.minimum(np.floor(draws), cap).astype(np.int64)


def simulate_lbsl(params: LbslParams, steps: int, length_sampler, seed: int = 0, workers: int = 1):
    """Run LBSL and plain SL side by side on one stream of rank batches.

    ``length_sampler(rng, (R, b))`` draws raw lengths. Returns a list of
    per-step dicts with raw, SL and LBSL per-rank loads.
    """
    data_rng = np.random.default_rng(seed)
    lb_state = init_lbsl(params)
    sl_state = init_lbsl(params)
    rows = []
    for _ in range(steps):
        lengths = length_sampler(data_rng, (params.world_size, params.batch_size))
        lb = lbsl_step(lb_state, lengths, workers=workers)
        sl = lbsl_step(sl_state, lengths, workers=workers, balanced=False)
        rows.append(
            {
                "step": lb_state.step,
                "phase": "warmup" if lb_state.step <= params.warmup_steps else "steady",
                "target_load": lb_state.target_load,
                "raw": np.array([d.raw_load for d in lb]),
                "lbsl": np.array([d.realized_load for d in lb]),
                "sl": np.array([d.realized_load for d in sl]),
            }
        )
    return rows
