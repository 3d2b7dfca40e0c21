"""Synthetic users whose labels depend on their most recent events.

Every item belongs to category ``item % n_categories``. For a candidate item:

* task 0 fires if its category appears among the last ``window`` history events;
* task 1 fires if it appears among those of the last ``window`` events whose
  action set contains ``like_action``.

Each label is then flipped with probability ``noise``. Since candidates are
drawn uniformly and independently of history, base rates and the
Bayes-optimal NE have closed forms (see :func:`analytic_base_rates`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..dataset import Record
from ..errors import ConfigError
from ..metrics_scaling import binary_entropy
from ..sequence_input import pareto_lengths


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 4000
    item_vocab: int = 64
    n_categories: int = 16
    action_vocab: int = 4
    length: dict = field(default_factory=lambda: {"kind": "uniform", "min": 8, "max": 32})
    window: int = 8
    noise: float = 0.0
    n_candidates: int = 1
    like_action: int = 1
    action_probs: tuple = (1.0, 0.3, 0.1, 0.05)  # per action id, independent
    n_tasks: int = 2

    def __post_init__(self):
        if self.item_vocab % self.n_categories:
            raise ConfigError("item_vocab must be a multiple of n_categories")
        if len(self.action_probs) != self.action_vocab:
            raise ConfigError("action_probs needs one entry per action id")
        if not 0.0 <= self.noise < 0.5:
            raise ConfigError(f"noise must lie in [0, 0.5), got {self.noise}")
        if self.n_tasks not in (1, 2):
            raise ConfigError("the synthetic rule defines one or two tasks")
        if self.length.get("kind") not in ("uniform", "pareto"):
            raise ConfigError(f"unknown length distribution {self.length!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["action_probs"] = list(self.action_probs)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        if "action_probs" in data:
            data["action_probs"] = tuple(data["action_probs"])
        return cls(**data)


def sample_lengths(spec: SyntheticSpec, rng, size) -> np.ndarray:
    dist = spec.length
    if dist["kind"] == "uniform":
        return rng.integers(dist["min"], dist["max"] + 1, size)
    return pareto_lengths(rng, size, dist.get("shape", 1.5), dist.get("min", 64), dist.get("cap", 16384))


def length_pmf(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Support and probabilities of the history-length distribution."""
    dist = spec.length
    if dist["kind"] == "uniform":
        support = np.arange(dist["min"], dist["max"] + 1)
        return support, np.full(support.size, 1.0 / support.size)
    shape, lo, cap = dist.get("shape", 1.5), dist.get("min", 64), dist.get("cap", 16384)
    support = np.arange(lo, cap + 1)
    # P(N >= n) = (lo / n) ** shape for n >= lo before flooring and capping
    surv = (lo / support.astype(float)) ** shape
    pmf = surv - np.append(surv[1:], 0.0)
    pmf[-1] = surv[-1]
    return support, pmf


def analytic_base_rates(spec: SyntheticSpec) -> np.ndarray:
    """Noise-free positive rate of each task."""
    support, pmf = length_pmf(spec)
    visible = np.minimum(support, spec.window)
    c = spec.n_categories
    q_like = spec.action_probs[spec.like_action]
    rates = [1.0 - pmf @ (1.0 - 1.0 / c) ** visible, 1.0 - pmf @ (1.0 - q_like / c) ** visible]
    return np.asarray(rates[: spec.n_tasks])


def observed_base_rates(spec: SyntheticSpec) -> np.ndarray:
    p = analytic_base_rates(spec)
    return p * (1.0 - spec.noise) + (1.0 - p) * spec.noise


def bayes_ne(spec: SyntheticSpec) -> np.ndarray:
    """NE of the Bayes-optimal predictor, which knows the rule and only suffers the noise."""
    return np.asarray([binary_entropy(spec.noise) / binary_entropy(p) for p in observed_base_rates(spec)])


def label_rule(items, actions, candidate, spec: SyntheticSpec) -> list:
    cat = candidate % spec.n_categories
    recent = slice(max(0, len(items) - spec.window), len(items))
    cats = [it % spec.n_categories for it in items[recent]]
    liked = [it % spec.n_categories for it, a in zip(items[recent], actions[recent]) if spec.like_action in a]
    return [int(cat in cats), int(cat in liked)][: spec.n_tasks]


def planted_features(record: Record, spec: SyntheticSpec) -> np.ndarray:
    """The true rule features of each candidate, for auditing learnability."""
    return np.asarray([label_rule(record.items, record.actions, c, spec) for c in record.candidates], float)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> list:
    """Deterministic list of records for ``spec`` and ``seed``."""
    rng = np.random.default_rng(seed)
    lengths = sample_lengths(spec, rng, spec.n_users)
    probs = np.asarray(spec.action_probs)
    records = []
    t = 0
    for uid, n in enumerate(lengths):
        items = rng.integers(0, spec.item_vocab, n).tolist()
        hits = rng.random((n, spec.action_vocab)) < probs
        actions = [np.flatnonzero(h).tolist() for h in hits]
        gaps = rng.integers(1, 100, n)
        timestamps = (t + np.cumsum(gaps)).tolist()
        request_time = int(timestamps[-1] + 1) if n else t + 1
        t += int(rng.integers(1, 20))
        candidates = rng.integers(0, spec.item_vocab, spec.n_candidates).tolist()
        labels = []
        for c in candidates:
            row = label_rule(items, actions, c, spec)
            flips = rng.random(len(row)) < spec.noise
            labels.append([int(v ^ f) for v, f in zip(row, flips)])
        records.append(Record(uid, items, actions, timestamps, candidates, labels, request_time))
    return records
