"""Software emulation of FP8 (e4m3) row-scaled GEMMs and groupwise INT4 codes.

The e4m3 flavour is the common ML one: 4 exponent bits (bias 7), 3 mantissa
bits, no infinities, a single NaN pattern per sign (``0x7F``/``0xFF``) and a
largest finite magnitude of 448.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

E4M3_MAX = 448.0
_NAN_CODES = (0x7F, 0xFF)


def _build_decode_table() -> np.ndarray:
    table = np.empty(256)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if code in _NAN_CODES:
            table[code] = np.nan
        elif exp == 0:
            table[code] = sign * man / 8.0 * 2.0**-6
        else:
            table[code] = sign * (1.0 + man / 8.0) * 2.0 ** (exp - 7)
    return table


E4M3_DECODE = _build_decode_table()
E4M3_DECODE.flags.writeable = False
# codes 0..126 are the non-negative finite values, already ascending
_POS_VALUES = E4M3_DECODE[:127]


def e4m3_encode(x) -> np.ndarray:
    """Round-to-nearest-even onto e4m3, saturating at +-448."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot encode NaN or Inf to e4m3")
    mag = np.minimum(np.abs(x), E4M3_MAX)
    hi = np.searchsorted(_POS_VALUES, mag, side="left")  # first value >= mag
    hi = np.minimum(hi, 126)
    lo = np.maximum(hi - 1, 0)
    d_lo = mag - _POS_VALUES[lo]
    d_hi = _POS_VALUES[hi] - mag
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    code = np.where(pick_hi, hi, lo).astype(np.uint8)
    negative = (x < 0) & (code != 0)
    return np.where(negative, code | 0x80, code).astype(np.uint8)


def e4m3_decode(codes) -> np.ndarray:
    return E4M3_DECODE[np.asarray(codes, dtype=np.uint8)]


@dataclass(frozen=True)
class Fp8RowQuant:
    codes: np.ndarray  # uint8 (m, k)
    row_scale: np.ndarray  # (m,)

    @property
    def shape(self):
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return e4m3_decode(self.codes) * self.row_scale[:, None]


def fp8_quantize_rowwise(x) -> Fp8RowQuant:
    """Scale each row so its largest magnitude maps to 448, then encode."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("fp8 quantization needs finite inputs")
    amax = np.abs(x).max(axis=1) if x.shape[1] else np.zeros(x.shape[0])
    scale = np.where(amax > 0, amax / E4M3_MAX, 1.0)
    return Fp8RowQuant(e4m3_encode(x / scale[:, None]), scale)


def fp8_gemm_emulated(aq: Fp8RowQuant, bq_t: Fp8RowQuant, bias=None) -> np.ndarray:
    """``dequant(A) @ dequant(B^T)^T + bias`` with float64 accumulation.

    ``bq_t`` holds B transposed (one scale per output column). ``bias`` may be
    1-D (broadcast over rows) or a full 2-D addend such as a residual stream.
    """
    m, k = aq.shape
    n, k2 = bq_t.shape
    if k != k2:
        raise DimensionError(f"inner dimensions differ: {k} vs {k2}")
    out = aq.dequantize() @ bq_t.dequantize().T
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape not in ((n,), (m, n)):
            raise DimensionError(f"bias must be ({n},) or ({m}, {n}), got {bias.shape}")
        out = out + bias
    return out


def fp8_linear(a, w, bias=None) -> np.ndarray:
    """``a @ w + bias`` with both operands quantized row-wise to e4m3."""
    a = np.asarray(a)
    out = fp8_gemm_emulated(fp8_quantize_rowwise(a), fp8_quantize_rowwise(np.asarray(w).T), bias)
    return out.astype(a.dtype, copy=False)


# ---------------------------------------------------------------------------
# groupwise INT4


@dataclass(frozen=True)
class Int4GroupQuant:
    codes: np.ndarray  # uint8 values in [0, 15], same length as the row
    group_size: int
    scale: np.ndarray  # per group; 0 marks a constant group
    zero_point: np.ndarray  # per group minimum

    @property
    def n_groups(self) -> int:
        return self.scale.size


def _group_bounds(n: int, g: int):
    starts = np.arange(0, n, g)
    return starts, np.minimum(starts + g, n)


def int4_group_quantize(row, g: int) -> Int4GroupQuant:
    """Asymmetric min/max INT4 codes per group of ``g`` consecutive entries."""
    if g < 1:
        raise DomainError(f"group size must be >= 1, got {g}")
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    starts, _ = _group_bounds(row.size, g)
    if row.size == 0:
        return Int4GroupQuant(np.zeros(0, np.uint8), g, np.zeros(0), np.zeros(0))
    mn = np.minimum.reduceat(row, starts)
    mx = np.maximum.reduceat(row, starts)
    scale = (mx - mn) / 15.0
    gid = np.arange(row.size) // g
    safe = np.where(scale > 0, scale, 1.0)
    # arguments are >= 0 here, so floor(v + 0.5) rounds halves away from zero
    codes = np.floor((row - mn[gid]) / safe[gid] + 0.5)
    codes = np.where(scale[gid] > 0, np.clip(codes, 0, 15), 0).astype(np.uint8)
    return Int4GroupQuant(codes, g, scale, mn)


def int4_group_dequantize(q: Int4GroupQuant) -> np.ndarray:
    gid = np.arange(q.codes.size) // q.group_size
    return q.codes * q.scale[gid] + q.zero_point[gid]


def pack_nibbles(codes: np.ndarray) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, n: int) -> np.ndarray:
    packed = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


INT4_MAGIC = b"UHSTUQ4\x00"
INT4_VERSION = 1


def write_int4_tables(path, tables: dict, g: int) -> dict:
    """Quantize each 2-D table row by row and write the packed file.

    Layout: magic, ``<III`` (version, g, n_tables), then per table a
    length-prefixed UTF-8 name, ``<II`` (rows, cols), float32 scales,
    float32 zero points, packed nibbles (low nibble first).
    Returns per-table max absolute reconstruction error and its bound.
    """
    report = {}
    with open(path, "wb") as fh:
        fh.write(INT4_MAGIC)
        fh.write(struct.pack("<III", INT4_VERSION, g, len(tables)))
        for name, table in tables.items():
            table = np.asarray(table, dtype=np.float64)
            rows, cols = table.shape
            quants = [int4_group_quantize(r, g) for r in table]
            scales = np.concatenate([q.scale for q in quants]) if rows else np.zeros(0)
            zps = np.concatenate([q.zero_point for q in quants]) if rows else np.zeros(0)
            codes = np.concatenate([q.codes for q in quants]) if rows else np.zeros(0, np.uint8)
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)) + encoded)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(scales.astype("<f4").tobytes())
            fh.write(zps.astype("<f4").tobytes())
            fh.write(pack_nibbles(codes))
            errs = [np.abs(int4_group_dequantize(q) - r) for q, r in zip(quants, table)]
            report[name] = {
                "rows": rows,
                "cols": cols,
                "max_abs_error": float(max((e.max() for e in errs if e.size), default=0.0)),
                "max_half_scale": float(scales.max() / 2) if scales.size else 0.0,
            }
    return report


def read_int4_tables(path) -> tuple[int, dict]:
    """Inverse of :func:`write_int4_tables`; returns ``(g, {name: dequantized table})``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != INT4_MAGIC:
        raise DomainError(f"{path} is not an INT4 table file")
    version, g, n_tables = struct.unpack_from("<III", data, 8)
    if version != INT4_VERSION:
        raise DomainError(f"unsupported INT4 file version {version}")
    pos = 20
    tables = {}
    for _ in range(n_tables):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode()
        pos += name_len
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        n_groups = rows * (-(-cols // g))
        scales = np.frombuffer(data, "<f4", n_groups, pos).astype(np.float64)
        pos += 4 * n_groups
        zps = np.frombuffer(data, "<f4", n_groups, pos).astype(np.float64)
        pos += 4 * n_groups
        n_codes = rows * cols
        n_bytes = (n_codes + 1) // 2
        codes = unpack_nibbles(data[pos : pos + n_bytes], n_codes).reshape(rows, cols)
        pos += n_bytes
        per_row = n_groups // rows if rows else 0
        out = np.empty((rows, cols))
        for r in range(rows):
            q = Int4GroupQuant(codes[r], g, scales[r * per_row : (r + 1) * per_row], zps[r * per_row : (r + 1) * per_row])
            out[r] = int4_group_dequantize(q)
        tables[name] = out
    return g, tables
