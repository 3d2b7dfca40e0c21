"""Padding-free batches of variable-length embedding sequences.

A :class:`JaggedBatch` stores every sequence of a batch back to back in one
``(total_len, d)`` buffer and keeps ``B + 1`` offsets into it. Row 0 of each
sequence is its earliest event and row ``L_i - 1`` its latest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class JaggedBatch:
    values: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DimensionError(f"values must be 2-D (total_len, d), got shape {values.shape}")
        offsets = np.asarray(self.offsets, dtype=np.int64)
        if offsets.ndim != 1 or offsets.size == 0 or offsets[0] != 0:
            raise DimensionError("offsets must be a non-empty 1-D array starting at 0")
        if np.any(np.diff(offsets) < 0):
            raise DomainError("offsets must be non-decreasing")
        if offsets[-1] != values.shape[0]:
            raise DimensionError(
                f"offsets end at {offsets[-1]} but values hold {values.shape[0]} rows"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "offsets", offsets)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def batch_size(self) -> int:
        return self.offsets.size - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def total_len(self) -> int:
        return int(self.offsets[-1])

    def __len__(self):
        return self.batch_size

    def with_values(self, values: np.ndarray) -> "JaggedBatch":
        """Same layout, different payload (e.g. a layer's output)."""
        return JaggedBatch(values, self.offsets)


def offsets_from_lengths(lengths: Sequence[int]) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    if np.any(lengths < 0):
        raise DomainError(f"sequence lengths must be >= 0, got {lengths.tolist()}")
    offsets = np.zeros(lengths.size + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return offsets


def build_jagged(lengths: Sequence[int], values, d: int) -> JaggedBatch:
    """Build a batch from per-sequence lengths and a flat value buffer.

    ``values`` may be flat (``sum(lengths) * d`` numbers) or already shaped
    ``(sum(lengths), d)``.
    """
    if d < 1:
        raise DomainError(f"embedding dimension must be >= 1, got {d}")
    offsets = offsets_from_lengths(lengths)
    values = np.asarray(values)
    if values.dtype.kind != "f":
        values = values.astype(np.float64)
    if values.size != offsets[-1] * d:
        raise DimensionError(
            f"sum(lengths) * d = {offsets[-1] * d} but {values.size} values were given"
        )
    return JaggedBatch(values.reshape(int(offsets[-1]), d), offsets)


def from_sequences(sequences: Sequence[np.ndarray], d: int | None = None) -> JaggedBatch:
    """Concatenate dense ``(L_i, d)`` matrices into one batch."""
    if not sequences:
        if d is None:
            raise DimensionError("d is required to build an empty batch")
        return JaggedBatch(np.zeros((0, d)), np.zeros(1, dtype=np.int64))
    mats = [np.asarray(s) for s in sequences]
    d = mats[0].shape[1] if d is None else d
    for m in mats:
        if m.ndim != 2 or m.shape[1] != d:
            raise DimensionError(f"every sequence must be (L_i, {d}), got {m.shape}")
    return JaggedBatch(np.concatenate(mats, axis=0), offsets_from_lengths([m.shape[0] for m in mats]))


def per_sequence_view(batch: JaggedBatch, i: int) -> np.ndarray:
    """Zero-copy ``(L_i, d)`` view of sequence ``i``."""
    if not 0 <= i < batch.batch_size:
        raise IndexError(f"sequence index {i} out of range for batch of {batch.batch_size}")
    return batch.values[batch.offsets[i] : batch.offsets[i + 1]]


def split(batch: JaggedBatch) -> list[np.ndarray]:
    return [per_sequence_view(batch, i) for i in range(batch.batch_size)]


def segment_ids(offsets: np.ndarray) -> np.ndarray:
    """Sequence index of every row."""
    lengths = np.diff(offsets)
    return np.repeat(np.arange(lengths.size), lengths)


def latest_rows(offsets: np.ndarray, l_prime: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (into the flat buffer) of the last ``l_prime`` rows of each sequence.

    Returns ``(rows, new_offsets)``; rows stay in ascending time order.
    """
    if l_prime < 0:
        raise DomainError(f"l_prime must be >= 0, got {l_prime}")
    offsets = np.asarray(offsets, dtype=np.int64)
    lengths = np.diff(offsets)
    keep = np.minimum(lengths, l_prime)
    new_offsets = offsets_from_lengths(keep)
    starts = offsets[1:] - keep
    rows = np.repeat(starts - new_offsets[:-1], keep) + np.arange(new_offsets[-1])
    return rows, new_offsets


def slice_latest(batch: JaggedBatch, l_prime: int) -> JaggedBatch:
    """Keep the temporally latest ``min(L_i, l_prime)`` rows of every sequence."""
    rows, new_offsets = latest_rows(batch.offsets, l_prime)
    return JaggedBatch(batch.values[rows], new_offsets)
