"""Causal and semi-local attention masks, and pointwise SiLU attention.

Positions are time-ascending: query ``q`` may look at key ``k`` only when
``k <= q``. A semi-local mask further restricts that to a local band
``q - k <= k1`` plus a block of ``k2`` global keys, either the earliest
(``anchor="start"``) or the latest (``anchor="end"``) ``k2`` positions.

Attention only ever touches allowed ``(q, k)`` pairs, so its cost is
proportional to :func:`mask_nnz` rather than ``L**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DimensionError, DomainError
from .functional import silu, silu_grad

CAUSAL = "causal"
SEMI_LOCAL = "semi_local"


@dataclass(frozen=True)
class MaskSpec:
    kind: str = CAUSAL
    k1: int = 0
    k2: int = 0
    anchor: str = "start"

    def __post_init__(self):
        if self.kind not in (CAUSAL, SEMI_LOCAL):
            raise DomainError(f"unknown mask kind {self.kind!r}")
        if self.k1 < 0 or self.k2 < 0:
            raise DomainError(f"window sizes must be >= 0, got k1={self.k1}, k2={self.k2}")
        if self.anchor not in ("start", "end"):
            raise DomainError(f"anchor must be 'start' or 'end', got {self.anchor!r}")

    @classmethod
    def full_causal(cls) -> "MaskSpec":
        return cls()

    @classmethod
    def semi_local(cls, k1: int, k2: int, anchor: str = "start") -> "MaskSpec":
        return cls(SEMI_LOCAL, int(k1), int(k2), anchor)

    def to_dict(self) -> dict:
        if self.kind == CAUSAL:
            return {"kind": CAUSAL}
        return {"kind": SEMI_LOCAL, "k1": self.k1, "k2": self.k2, "anchor": self.anchor}

    @classmethod
    def from_dict(cls, data: dict) -> "MaskSpec":
        return cls(
            data.get("kind", CAUSAL), int(data.get("k1", 0)), int(data.get("k2", 0)), data.get("anchor", "start")
        )


def mask_allows(spec: MaskSpec, q: int, k: int, L: int) -> bool:
    if not (0 <= q < L and 0 <= k < L):
        raise DomainError(f"positions (q={q}, k={k}) out of range for L={L}")
    if k > q:
        return False
    if spec.kind == CAUSAL:
        return True
    if q - k <= spec.k1:
        return True
    if spec.anchor == "start":
        return k < spec.k2
    return k >= L - spec.k2


def _band_prefix(n: int, k1: int) -> int:
    # sum_{j=0}^{n-1} min(k1, j)
    if n <= k1 + 1:
        return n * (n - 1) // 2
    return k1 * (k1 + 1) // 2 + (n - k1 - 1) * k1


def mask_nnz(spec: MaskSpec, L: int) -> int:
    """Number of allowed ``(q, k)`` pairs, in closed form."""
    if L < 0:
        raise DomainError(f"L must be >= 0, got {L}")
    if spec.kind == CAUSAL:
        return L * (L + 1) // 2
    k1 = spec.k1
    band = L + _band_prefix(L, k1)
    g = min(spec.k2, L)
    if spec.anchor == "start":
        glob = g * L - g * (g - 1) // 2
        overlap = g + _band_prefix(L, k1) - _band_prefix(L - g, k1)
    else:
        glob = g * (g + 1) // 2
        overlap = g + _band_prefix(g, k1)
    return band + glob - overlap


def _expand_ranges(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    counts = hi - lo
    starts = np.zeros_like(counts)
    np.cumsum(counts[:-1], out=starts[1:])
    return np.repeat(lo - starts, counts) + np.arange(counts.sum())


@lru_cache(maxsize=4096)
def _pairs_cached(spec: MaskSpec, L: int) -> tuple[np.ndarray, np.ndarray]:
    q = np.arange(L, dtype=np.int64)
    hi = q + 1
    if spec.kind == CAUSAL:
        lo1, hi1 = np.zeros_like(q), hi
        lo2 = hi2 = hi
    else:
        local_lo = np.maximum(q - spec.k1, 0)
        if spec.anchor == "start":
            g_hi = np.minimum(spec.k2, hi)
            merged = g_hi >= local_lo
            lo1 = np.zeros_like(q)
            hi1 = np.where(merged, hi, g_hi)
            lo2 = np.where(merged, hi, local_lo)
            hi2 = hi
        else:
            g_lo = max(L - spec.k2, 0)
            lo1 = np.where(q >= g_lo, np.minimum(local_lo, g_lo), local_lo)
            hi1 = hi
            lo2 = hi2 = hi
    lo = np.stack([lo1, lo2], axis=1).ravel()
    hi_ = np.stack([hi1, hi2], axis=1).ravel()
    ki = _expand_ranges(lo, hi_)
    qi = np.repeat(np.repeat(q, 2), hi_ - lo)
    qi.flags.writeable = False
    ki.flags.writeable = False
    return qi, ki


def allowed_pairs(spec: MaskSpec, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Allowed ``(q, k)`` index pairs of one sequence, sorted by ``q`` then ``k``.

    Built from at most two key ranges per query, so construction is linear in
    the number of pairs.
    """
    if L < 0:
        raise DomainError(f"L must be >= 0, got {L}")
    return _pairs_cached(spec, int(L))


@dataclass(frozen=True)
class PairIndex:
    """Allowed pairs of a whole jagged batch in flat row coordinates."""

    qi: np.ndarray
    ki: np.ndarray
    scale: np.ndarray  # per-pair score multiplier (1/L_i or 1)
    q_starts: np.ndarray
    k_order: np.ndarray
    k_starts: np.ndarray
    n_rows: int

    @property
    def size(self) -> int:
        return self.qi.size


@lru_cache(maxsize=256)
def _jagged_pairs_cached(spec: MaskSpec, lengths: tuple, norm: bool) -> PairIndex:
    qs, ks, cs = [], [], []
    start = 0
    for L in lengths:
        qi, ki = allowed_pairs(spec, L)
        qs.append(qi + start)
        ks.append(ki + start)
        cs.append(np.full(qi.size, 1.0 / max(L, 1) if norm else 1.0))
        start += L
    if qs:
        qi, ki, scale = np.concatenate(qs), np.concatenate(ks), np.concatenate(cs)
    else:
        qi = ki = np.zeros(0, dtype=np.int64)
        scale = np.zeros(0)
    # the diagonal is always allowed, so every row owns at least one pair
    q_starts = np.searchsorted(qi, np.arange(start))
    k_order = np.argsort(ki, kind="stable")
    k_starts = np.searchsorted(ki[k_order], np.arange(start))
    return PairIndex(qi, ki, scale, q_starts, k_order, k_starts, start)


def jagged_pairs(spec: MaskSpec, offsets, norm: bool = True) -> PairIndex:
    lengths = tuple(int(x) for x in np.diff(np.asarray(offsets)))
    return _jagged_pairs_cached(spec, lengths, bool(norm))


def _segment_sum(x: np.ndarray, starts: np.ndarray, n_rows: int) -> np.ndarray:
    if n_rows == 0:
        return np.zeros((0,) + x.shape[1:], dtype=x.dtype)
    return np.add.reduceat(x, starts, axis=0)


@dataclass
class AttentionCache:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    spec: MaskSpec
    offsets: np.ndarray
    num_heads: int
    norm: bool
    pairs: PairIndex = field(repr=False)

    @property
    def pairs_visited(self) -> int:
        """Allowed (q, k) pairs touched per head; equals the summed mask_nnz."""
        return self.pairs.size


def _check_inputs(q, k, v, offsets, num_heads):
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 2:
        raise DimensionError(f"q, k, v must share a 2-D shape, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] % num_heads:
        raise DimensionError(f"width {q.shape[1]} is not divisible by {num_heads} heads")
    if offsets[-1] != q.shape[0]:
        raise DimensionError(f"offsets cover {offsets[-1]} rows, inputs have {q.shape[0]}")


def attention_forward(q, k, v, spec: MaskSpec, norm: bool = True, offsets=None, num_heads: int = 1):
    """Masked pointwise attention ``A[q] = sum_k silu(<Q[q], K[k]>) * c * V[k]``.

    ``c`` is ``1 / L_i`` when ``norm`` is set, else 1. Inputs are ``(N, d)``
    row blocks of one sequence (``offsets=None``) or of a jagged batch; the
    width is split into ``num_heads`` equal heads.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    offsets = np.array([0, q.shape[0]]) if offsets is None else np.asarray(offsets)
    _check_inputs(q, k, v, offsets, num_heads)
    pairs = jagged_pairs(spec, offsets, norm)
    n, width = q.shape
    dh = width // num_heads
    out = np.empty_like(q)
    qi, ki = pairs.qi, pairs.ki
    for h in range(num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        s = np.einsum("pd,pd->p", qh[qi], kh[ki])
        w = silu(s) * pairs.scale
        out[:, cols] = _segment_sum(w[:, None] * vh[ki], pairs.q_starts, n)
    return out, AttentionCache(q, k, v, spec, offsets, num_heads, norm, pairs)


def attention_backward(dA, cache: AttentionCache, spec: MaskSpec | None = None):
    """Gradients ``(dq, dk, dv)`` of :func:`attention_forward`."""
    if spec is not None and spec != cache.spec:
        raise DomainError(f"backward mask {spec} does not match forward mask {cache.spec}")
    dA = np.asarray(dA)
    if dA.shape != cache.q.shape:
        raise DimensionError(f"dA has shape {dA.shape}, expected {cache.q.shape}")
    pairs = cache.pairs
    n, width = cache.q.shape
    dh = width // cache.num_heads
    qi, ki = pairs.qi, pairs.ki
    dq = np.empty_like(cache.q)
    dk = np.empty_like(cache.k)
    dv = np.empty_like(cache.v)
    for h in range(cache.num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh, kh, vh, dah = cache.q[:, cols], cache.k[:, cols], cache.v[:, cols], dA[:, cols]
        q_rows, k_rows, da_rows = qh[qi], kh[ki], dah[qi]
        s = np.einsum("pd,pd->p", q_rows, k_rows)
        w = silu(s) * pairs.scale
        dw = np.einsum("pd,pd->p", da_rows, vh[ki])
        ds = dw * pairs.scale * silu_grad(s)
        order = pairs.k_order
        dv[:, cols] = _segment_sum((w[:, None] * da_rows)[order], pairs.k_starts, n)
        dk[:, cols] = _segment_sum((ds[:, None] * q_rows)[order], pairs.k_starts, n)
        dq[:, cols] = _segment_sum(ds[:, None] * k_rows, pairs.q_starts, n)
    return dq, dk, dv


def dense_mask(spec: MaskSpec, L: int) -> np.ndarray:
    """Boolean ``(L, L)`` mask, for plotting and small-scale checks."""
    mask = np.zeros((L, L), dtype=bool)
    qi, ki = allowed_pairs(spec, L)
    mask[qi, ki] = True
    return mask
