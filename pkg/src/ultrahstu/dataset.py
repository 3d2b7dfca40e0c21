"""Per-user ranking examples and their JSONL storage.

One record holds a user's time-ordered history (items, action sets,
timestamps), the candidate items ranked at ``request_time``, and one label
row per candidate with an entry per task.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError
from .sequence_input import EventSequence


@dataclass
class Record:
    user_id: int
    items: list
    actions: list
    timestamps: list
    candidates: list
    labels: list  # (n_candidates, n_tasks)
    request_time: float = 0.0
    context: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.items) == len(self.actions) == len(self.timestamps)):
            raise DomainError(f"user {self.user_id}: history fields differ in length")
        if len(self.labels) != len(self.candidates):
            raise DomainError(f"user {self.user_id}: one label row per candidate expected")
        if not self.candidates:
            raise DomainError(f"user {self.user_id}: at least one candidate is required")

    @property
    def history_length(self) -> int:
        return len(self.items)

    def to_sequence(self, keep=None) -> EventSequence:
        """History (optionally only positions ``keep``) followed by the candidates."""
        idx = range(len(self.items)) if keep is None else keep
        items = [self.items[i] for i in idx] + list(self.candidates)
        actions = [self.actions[i] for i in idx] + [[] for _ in self.candidates]
        ts = [self.timestamps[i] for i in idx] + [self.request_time] * len(self.candidates)
        flags = [False] * (len(items) - len(self.candidates)) + [True] * len(self.candidates)
        return EventSequence(items, actions, flags, ts, list(self.context))


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Record(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise DomainError(f"{path}:{lineno}: {exc}") from exc
    return out


def chronological_split(records, train_fraction: float = 0.85):
    """Split by request time so every eval record is strictly later than every train record.

    Records tied with the last training timestamp stay in training.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DomainError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    ordered = sorted(records, key=lambda r: (r.request_time, r.user_id))
    cut = int(np.floor(train_fraction * len(ordered)))
    if cut == 0:
        return [], ordered
    boundary = ordered[cut - 1].request_time
    while cut < len(ordered) and ordered[cut].request_time <= boundary:
        cut += 1
    return ordered[:cut], ordered[cut:]


def labels_matrix(records) -> np.ndarray:
    return np.asarray([row for r in records for row in r.labels], dtype=np.float64)
