"""Schema-driven loader for KuaiRand-style interaction logs.

The CSV must provide a user column, an item column and a timestamp column;
each action column maps to an action id and counts as present when its value
is a positive number. Task columns label the held-out candidate events.
How the public benchmark maps actions to tasks is not documented, so the
default schema is only a reasonable reading of the released column names.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

from ..dataset import Record
from ..errors import DomainError

log = logging.getLogger(__name__)

MAX_LENGTH = 256


@dataclass
class KuaiRandSchema:
    user: str = "user_id"
    item: str = "video_id"
    timestamp: str = "time_ms"
    actions: dict = field(default_factory=lambda: {"is_click": 0, "is_like": 1, "is_follow": 2, "is_comment": 3,
                                                   "is_forward": 4, "long_view": 5})
    tasks: list = field(default_factory=lambda: ["is_click", "long_view"])

    @classmethod
    def from_dict(cls, data: dict) -> "KuaiRandSchema":
        return cls(**data)


@dataclass
class IngestReport:
    n_rows: int = 0
    n_users: int = 0
    errors: list = field(default_factory=list)  # (line number, message)
    item_index: dict = field(default_factory=dict)

    @property
    def error_rate(self) -> float:
        return len(self.errors) / self.n_rows if self.n_rows else 0.0


def _positive(value: str) -> bool:
    value = value.strip()
    return bool(value) and float(value) > 0


def ingest_kuairand(
    path,
    schema: KuaiRandSchema | None = None,
    max_length: int = MAX_LENGTH,
    n_holdout: int = 1,
    max_error_rate: float = 0.01,
):
    """Read the log into per-user records; returns ``(records, report)``.

    Each user's events are sorted by time (stable on ties) and capped to the
    latest ``max_length``; the last ``n_holdout`` events become candidates.
    Malformed rows are skipped and reported by line number; more than
    ``max_error_rate`` of them aborts the load.
    """
    schema = schema or KuaiRandSchema()
    report = IngestReport()
    events: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = [schema.user, schema.item, schema.timestamp, *schema.actions, *schema.tasks]
        missing = [c for c in dict.fromkeys(needed) if c not in (reader.fieldnames or [])]
        if missing:
            raise DomainError(f"{path}: missing columns {missing}")
        for row in reader:
            report.n_rows += 1
            line = reader.line_num
            try:
                user = int(row[schema.user])
                item_key = row[schema.item].strip()
                if not item_key:
                    raise ValueError("empty item id")
                ts = float(row[schema.timestamp])
                actions = sorted(a for col, a in schema.actions.items() if _positive(row[col]))
                labels = [int(_positive(row[c])) for c in schema.tasks]
            except (TypeError, ValueError) as exc:
                report.errors.append((line, str(exc)))
                continue
            item = report.item_index.setdefault(item_key, len(report.item_index))
            events.setdefault(user, []).append((ts, len(events.get(user, [])), item, actions, labels))
    for line, msg in report.errors[:20]:
        log.warning("%s:%d: skipped malformed row (%s)", path, line, msg)
    if report.error_rate > max_error_rate:
        raise DomainError(
            f"{path}: {len(report.errors)} of {report.n_rows} rows malformed "
            f"(first at line {report.errors[0][0]}), above the {max_error_rate:.1%} limit"
        )
    records = []
    for user in sorted(events):
        evs = sorted(events[user], key=lambda e: (e[0], e[1]))[-max_length:]
        hold = min(n_holdout, len(evs))
        hist, cand = evs[: len(evs) - hold], evs[len(evs) - hold :]
        records.append(
            Record(
                user_id=user,
                items=[e[2] for e in hist],
                actions=[e[3] for e in hist],
                timestamps=[e[0] for e in hist],
                candidates=[e[2] for e in cand],
                labels=[e[4] for e in cand],
                request_time=cand[0][0],
            )
        )
    report.n_users = len(records)
    return records, report
