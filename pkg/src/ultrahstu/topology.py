"""Full models: layer stacks with optional attention truncation, mixture of
transducers (MoT) over several input sequences, and the multi-task head.

A stage is ``n_layers`` HSTU blocks sharing one mask. A stage with
``truncate=L'`` first cuts every sequence down to ``L'`` rows (by default the
latest ones) and only then runs its blocks, so deep layers see short inputs.
Candidates live at the tail of each sequence and always survive truncation.

Parameters are kept in a flat ``{name: array}`` dict so optimizers and
checkpoints need no knowledge of the topology.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import MaskSpec
from .errors import ConfigError, DimensionError, NotSupportedError
from .functional import sigmoid, softplus
from .hstu_core import HstuLayerParams, backward, layer_forward, trunc_normal
from .jagged import JaggedBatch, latest_rows, offsets_from_lengths, segment_ids

SELECT_POLICIES = ("latest", "double_sl", "compress")


@dataclass(frozen=True)
class StageConfig:
    n_layers: int
    mask: MaskSpec = MaskSpec()
    truncate: int | None = None  # L'; None keeps the full sequence
    select: str = "latest"

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.truncate is not None and self.truncate <= 0:
            raise ConfigError(f"truncation length must be > 0, got {self.truncate}")
        if self.select not in SELECT_POLICIES:
            raise ConfigError(f"unknown selection policy {self.select!r}")

    def to_dict(self) -> dict:
        out = {"n_layers": self.n_layers, "mask": self.mask.to_dict(), "select": self.select}
        if self.truncate is not None:
            out["truncate"] = self.truncate
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StageConfig":
        return cls(
            int(data["n_layers"]),
            MaskSpec.from_dict(data.get("mask", {})),
            data.get("truncate"),
            data.get("select", "latest"),
        )


@dataclass(frozen=True)
class BranchConfig:
    name: str
    stages: tuple
    source: str | None = None  # input sequence key; defaults to the name

    @property
    def key(self) -> str:
        return self.source or self.name

    @property
    def depth(self) -> int:
        return sum(s.n_layers for s in self.stages)

    def to_dict(self) -> dict:
        return {"name": self.name, "source": self.key, "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, data: dict) -> "BranchConfig":
        return cls(data["name"], tuple(StageConfig.from_dict(s) for s in data["stages"]), data.get("source"))


@dataclass(frozen=True)
class ModelConfig:
    d: int
    num_heads: int = 1
    task_count: int = 1
    stages: tuple = (StageConfig(1),)
    mot: tuple | None = None  # BranchConfigs; enables concat+linear fusion
    norm: bool = True
    fp8: bool = False
    cache_mode: str = "full"
    task_weights: tuple | None = None

    def __post_init__(self):
        if self.d < 1 or self.num_heads < 1 or self.d % self.num_heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of num_heads={self.num_heads}")
        if self.task_count < 1:
            raise ConfigError("task_count must be >= 1")
        if self.cache_mode not in ("full", "minimal"):
            raise ConfigError(f"cache_mode must be 'full' or 'minimal', got {self.cache_mode!r}")
        if self.task_weights is not None and len(self.task_weights) != self.task_count:
            raise ConfigError("task_weights needs one entry per task")
        for branch in self.branches:
            if not branch.stages:
                raise ConfigError(f"branch {branch.name!r} has no stages")
        if self.mot is not None and len({b.name for b in self.mot}) != len(self.mot):
            raise ConfigError("branch names must be unique")

    @property
    def branches(self) -> tuple:
        if self.mot:
            return tuple(self.mot)
        return (BranchConfig("main", tuple(self.stages)),)

    @property
    def fused(self) -> bool:
        return bool(self.mot)

    @property
    def weights(self) -> np.ndarray:
        return np.ones(self.task_count) if self.task_weights is None else np.asarray(self.task_weights, float)

    def to_dict(self) -> dict:
        out = {
            "d": self.d,
            "num_heads": self.num_heads,
            "task_count": self.task_count,
            "norm": self.norm,
            "fp8": self.fp8,
            "cache_mode": self.cache_mode,
            "stages": [s.to_dict() for s in self.stages],
        }
        if self.mot:
            out["mot"] = [b.to_dict() for b in self.mot]
        if self.task_weights is not None:
            out["task_weights"] = list(self.task_weights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        mot = data.get("mot")
        return cls(
            d=int(data["d"]),
            num_heads=int(data.get("num_heads", 1)),
            task_count=int(data.get("task_count", 1)),
            stages=tuple(StageConfig.from_dict(s) for s in data.get("stages", [{"n_layers": 1}])),
            mot=tuple(BranchConfig.from_dict(b) for b in mot) if mot else None,
            norm=bool(data.get("norm", True)),
            fp8=bool(data.get("fp8", False)),
            cache_mode=data.get("cache_mode", "full"),
            task_weights=tuple(data["task_weights"]) if data.get("task_weights") else None,
        )


def layer_prefix(branch: str, stage: int, layer: int) -> str:
    return f"{branch}/s{stage}/l{layer}/"


def init_params(config: ModelConfig, rng: np.random.Generator, std: float = 0.02, dtype=np.float64) -> dict:
    """Fresh flat parameter dict for ``config``."""
    params = {}
    for branch in config.branches:
        for si, stage in enumerate(branch.stages):
            for li in range(stage.n_layers):
                lp = HstuLayerParams.init(config.d, rng, std, dtype)
                for k, v in lp.named().items():
                    params[layer_prefix(branch.name, si, li) + k] = v
    if config.fused:
        n = len(config.branches) * config.d
        params["fusion/w"] = trunc_normal(rng, (n, config.d), std, dtype)
        params["fusion/b"] = np.zeros(config.d, dtype)
    params["head/w"] = trunc_normal(rng, (config.d, config.task_count), std, dtype)
    params["head/b"] = np.zeros(config.task_count, dtype)
    return params


def layer_params(params: dict, prefix: str) -> HstuLayerParams:
    return HstuLayerParams(**{f: params[prefix + f] for f in HstuLayerParams.__dataclass_fields__})


# ---------------------------------------------------------------------------
# truncation


def truncation_indices(n_rows: int, policy: str, l_prime: int, is_candidate=None, rng=None) -> np.ndarray:
    """Row indices kept from one sequence of ``n_rows`` states.

    ``latest`` keeps the suffix. ``double_sl`` keeps every candidate row plus a
    uniform order-preserving subset of history rows, ``l_prime`` in total.
    """
    if l_prime <= 0:
        raise ConfigError(f"l_prime must be > 0, got {l_prime}")
    if is_candidate is None:
        is_candidate = np.zeros(n_rows, bool)
    is_candidate = np.asarray(is_candidate, bool)
    n_cand = int(is_candidate.sum())
    if n_cand > l_prime:
        raise ConfigError(f"truncation to {l_prime} rows would drop some of {n_cand} candidates")
    if policy == "latest":
        return np.arange(max(0, n_rows - l_prime), n_rows)
    if policy == "double_sl":
        if n_rows <= l_prime:
            return np.arange(n_rows)
        rng = rng if rng is not None else np.random.default_rng(0)
        hist = np.flatnonzero(~is_candidate)
        picked = rng.choice(hist, size=l_prime - n_cand, replace=False)
        return np.sort(np.concatenate([picked, np.flatnonzero(is_candidate)]))
    if policy == "compress":
        raise NotSupportedError("the compression selection policy is not implemented")
    raise ConfigError(f"unknown selection policy {policy!r}")


def truncation_select(states, policy: str, l_prime: int, is_candidate=None, rng=None) -> np.ndarray:
    """The ``(min(L, L'), d)`` block of one sequence's states kept by ``policy``."""
    states = np.asarray(states)
    return states[truncation_indices(states.shape[0], policy, l_prime, is_candidate, rng)]


def _select_rows(offsets, is_cand, stage: StageConfig, rng):
    l_prime = stage.truncate
    counts = np.bincount(segment_ids(offsets), weights=is_cand, minlength=len(offsets) - 1)
    if counts.size and counts.max() > l_prime:
        raise ConfigError(f"L'={l_prime} is smaller than the {int(counts.max())} candidates of some sequence")
    if stage.select == "latest":
        return latest_rows(offsets, l_prime)
    rows, lengths = [], []
    for i in range(len(offsets) - 1):
        lo, hi = offsets[i], offsets[i + 1]
        keep = truncation_indices(hi - lo, stage.select, l_prime, is_cand[lo:hi], rng) + lo
        rows.append(keep)
        lengths.append(keep.size)
    return np.concatenate(rows).astype(np.int64), offsets_from_lengths(lengths)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class BranchTrace:
    caches: list = field(default_factory=list)  # (kind, payload) in execution order
    offsets: np.ndarray = None
    cand_rows: np.ndarray = None
    n_input_rows: int = 0
    n_output_rows: int = 0


@dataclass
class ForwardCache:
    branches: dict
    cand_embeddings: np.ndarray
    branch_outputs: list
    logits: np.ndarray


def _as_inputs(config, inputs, is_candidate):
    if isinstance(inputs, JaggedBatch):
        if config.fused and len(config.branches) > 1:
            raise DimensionError("a multi-branch model needs one input batch per branch source")
        key = config.branches[0].key
        inputs, is_candidate = {key: inputs}, {key: is_candidate}
    out = {}
    for branch in config.branches:
        if branch.key not in inputs:
            raise DimensionError(f"no input sequence for branch source {branch.key!r}")
        batch = inputs[branch.key]
        flags = np.asarray(is_candidate[branch.key], bool)
        if flags.shape != (batch.total_len,):
            raise DimensionError(f"candidate flags for {branch.key!r} must have one entry per row")
        if batch.d != config.d:
            raise DimensionError(f"input width {batch.d} does not match model width {config.d}")
        out[branch.name] = (batch, flags)
    return out


def _branch_forward(branch: BranchConfig, config: ModelConfig, params, batch, flags, rng, cache_mode):
    trace = BranchTrace(n_input_rows=batch.total_len)
    x, offsets = batch.values, np.asarray(batch.offsets)
    for si, stage in enumerate(branch.stages):
        if stage.truncate is not None:
            rows, offsets = _select_rows(offsets, flags, stage, rng)
            trace.caches.append(("select", (rows, x.shape[0])))
            x, flags = x[rows], flags[rows]
        for li in range(stage.n_layers):
            lp = layer_params(params, layer_prefix(branch.name, si, li))
            x, cache = layer_forward(
                x, lp, stage.mask, cache_mode, offsets, config.num_heads, config.norm, config.fp8
            )
            trace.caches.append(("layer", (cache, layer_prefix(branch.name, si, li))))
    trace.offsets = offsets
    trace.n_output_rows = x.shape[0]
    trace.cand_rows = np.flatnonzero(flags)
    return x[trace.cand_rows], trace


def _candidate_counts(offsets, cand_rows):
    return np.bincount(segment_ids(offsets)[cand_rows], minlength=len(offsets) - 1)


def model_forward(params: dict, config: ModelConfig, inputs, is_candidate, rng=None, cache_mode=None):
    """Per-candidate, per-task probabilities ``(n_candidates, task_count)``.

    ``inputs`` is one :class:`JaggedBatch` (plain stack) or a dict keyed by
    branch source (MoT); ``is_candidate`` mirrors it with per-row flags.
    Returns ``(probs, cache)``.
    """
    cache_mode = cache_mode or config.cache_mode
    per_branch = _as_inputs(config, inputs, is_candidate)
    traces, outs, counts = {}, [], None
    for branch in config.branches:
        batch, flags = per_branch[branch.name]
        emb, trace = _branch_forward(branch, config, params, batch, flags, rng, cache_mode)
        c = _candidate_counts(trace.offsets, trace.cand_rows)
        if counts is None:
            counts = c
        elif not np.array_equal(c, counts):
            raise DimensionError(f"branch {branch.name!r} carries a different number of candidates per sequence")
        traces[branch.name] = trace
        outs.append(emb)
    if config.fused:
        emb = np.concatenate(outs, axis=1) @ params["fusion/w"] + params["fusion/b"]
    else:
        emb = outs[0]
    logits = emb @ params["head/w"] + params["head/b"]
    return sigmoid(logits), ForwardCache(traces, emb, outs, logits)


def mot_forward(params: dict, config: ModelConfig, sequences: dict, is_candidate: dict, rng=None):
    """Mixture of transducers: one stack per named sequence, fused before the head."""
    if not config.fused:
        raise ConfigError("mot_forward needs a config with MoT branches")
    return model_forward(params, config, sequences, is_candidate, rng)


def bce_loss(logits: np.ndarray, labels: np.ndarray, weights=None) -> tuple[float, np.ndarray]:
    """Weighted sum over tasks of mean binary cross-entropy; returns ``(loss, dlogits)``."""
    labels = np.asarray(labels, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    n = max(logits.shape[0], 1)
    w = np.ones(logits.shape[1]) if weights is None else np.asarray(weights, float)
    per_task = (softplus(logits) - labels * logits).sum(axis=0) / n
    dlogits = (sigmoid(logits) - labels) * w / n
    return float(per_task @ w), dlogits


def model_backward(dlogits: np.ndarray, cache: ForwardCache, params: dict, config: ModelConfig):
    """Gradients for every parameter plus ``{branch source: d input values}``."""
    grads = {}
    grads["head/w"] = cache.cand_embeddings.T @ dlogits
    grads["head/b"] = dlogits.sum(axis=0)
    demb = dlogits @ params["head/w"].T
    if config.fused:
        concat = np.concatenate(cache.branch_outputs, axis=1)
        grads["fusion/w"] = concat.T @ demb
        grads["fusion/b"] = demb.sum(axis=0)
        dconcat = demb @ params["fusion/w"].T
        d = config.d
        dbranch = [dconcat[:, i * d : (i + 1) * d] for i in range(len(config.branches))]
    else:
        dbranch = [demb]
    dinputs = {}
    for branch, dout in zip(config.branches, dbranch):
        trace = cache.branches[branch.name]
        dx = np.zeros((trace.n_output_rows, config.d), dtype=dout.dtype)
        dx[trace.cand_rows] = dout
        for kind, payload in reversed(trace.caches):
            if kind == "layer":
                lcache, prefix = payload
                dx, g = backward(dx, lcache, layer_params(params, prefix))
                for k, v in g.named().items():
                    grads[prefix + k] = v
            else:
                rows, n_prev = payload
                full = np.zeros((n_prev, config.d), dtype=dx.dtype)
                full[rows] = dx
                dx = full
        dinputs[branch.key] = dx
    return grads, dinputs


def stage_lengths(branch: BranchConfig, L: int) -> list:
    """Rows each stage of ``branch`` processes for an input of length ``L``."""
    out = []
    for stage in branch.stages:
        if stage.truncate is not None:
            L = min(L, stage.truncate)
        out.append(L)
    return out
