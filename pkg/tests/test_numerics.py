import ml_dtypes
import numpy as np
import pytest

from ultrahstu.attention import MaskSpec
from ultrahstu.errors import DimensionError, DomainError
from ultrahstu.hstu_core import HstuLayerParams, layer_forward
from ultrahstu.numerics import (
    E4M3_DECODE,
    E4M3_MAX,
    Fp8RowQuant,
    e4m3_decode,
    e4m3_encode,
    fp8_gemm_emulated,
    fp8_linear,
    fp8_quantize_rowwise,
    int4_group_dequantize,
    int4_group_quantize,
    pack_nibbles,
    read_int4_tables,
    unpack_nibbles,
    write_int4_tables,
)

FINITE = E4M3_DECODE[np.isfinite(E4M3_DECODE)]


def test_decode_table_matches_reference_format():
    ref = np.arange(256, dtype=np.uint8).view(ml_dtypes.float8_e4m3fn).astype(np.float64)
    assert np.array_equal(np.isnan(ref), np.isnan(E4M3_DECODE))
    ok = ~np.isnan(ref)
    assert np.array_equal(ref[ok], E4M3_DECODE[ok])
    assert np.nanmax(E4M3_DECODE) == 448.0


def test_encode_matches_reference_rounding():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(scale=50, size=20000), rng.uniform(-448, 448, 20000),
                        (FINITE[:-1] + np.diff(FINITE)) / 2])  # includes every tie
    x = np.clip(x, -448, 448)
    ref = x.astype(ml_dtypes.float8_e4m3fn).astype(np.float64)
    assert np.array_equal(e4m3_decode(e4m3_encode(x)), ref)


def test_encode_saturates_and_rejects_nan():
    assert e4m3_decode(e4m3_encode([1e6, -1e6])).tolist() == [448.0, -448.0]
    with pytest.raises(DomainError):
        e4m3_encode([np.nan])


def test_zero_row_and_boundary_row():
    q = fp8_quantize_rowwise(np.array([[0.0, 0.0, 0.0], [448.0, 0.0, 0.0]]))
    assert q.codes[0].tolist() == [0, 0, 0] and q.row_scale[0] == 1.0
    assert q.row_scale[1] == 1.0
    assert e4m3_decode(q.codes[1, :1])[0] == 448.0
    assert np.array_equal(q.dequantize()[1], [448.0, 0.0, 0.0])


def test_rowwise_relative_error_bound():
    rng = np.random.default_rng(1)
    x = rng.uniform(-10, 10, size=(200, 64))
    q = fp8_quantize_rowwise(x)
    scaled = np.abs(x / q.row_scale[:, None])
    normal = scaled >= 2.0**-6
    err = np.abs(q.dequantize() - x)
    assert np.all(err[normal] <= 2.0**-4 * np.abs(x[normal]) * (1 + 1e-12))
    # subnormal range: absolute spacing 2^-9 times the row scale
    sub = ~normal
    assert np.all(err[sub] <= 2.0**-10 * np.broadcast_to(q.row_scale[:, None], x.shape)[sub] * (1 + 1e-12))


def test_quantize_idempotent():
    rng = np.random.default_rng(2)
    q1 = fp8_quantize_rowwise(rng.normal(size=(20, 16)))
    q2 = fp8_quantize_rowwise(q1.dequantize())
    assert np.array_equal(q1.codes, q2.codes)


def test_gemm_identity_and_cancellation():
    rng = np.random.default_rng(3)
    b = rng.choice(FINITE[(np.abs(FINITE) <= 8)], size=(6, 4))
    a = np.eye(6)
    aq = fp8_quantize_rowwise(a)
    bq_t = Fp8RowQuant(e4m3_encode(b.T), np.ones(4))
    out = fp8_gemm_emulated(aq, bq_t)
    assert np.array_equal(out, b)
    prod = fp8_gemm_emulated(aq, bq_t)
    assert not fp8_gemm_emulated(aq, bq_t, -prod).any()


def interval_bound(a, w):
    """Worst-case |fp8(a) @ fp8(w) - a @ w| from per-element quantization intervals."""
    def half_ulp(x, scale):
        t = np.abs(x) / scale
        e = np.floor(np.log2(np.maximum(t, 2.0**-6)))
        return 2.0 ** (e - 4) * scale  # half of the 2^(e-3) spacing

    ea = half_ulp(a, np.abs(a).max(1, keepdims=True) / E4M3_MAX)
    ew = half_ulp(w, np.abs(w).max(0, keepdims=True) / E4M3_MAX)
    return np.abs(a) @ ew + ea @ np.abs(w) + ea @ ew


def test_gemm_within_interval_bound():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, w = rng.normal(size=(16, 32)), rng.normal(size=(32, 8))
        bias = rng.normal(size=8)
        err = np.abs(fp8_linear(a, w, bias) - (a @ w + bias))
        assert np.all(err <= interval_bound(a, w) * (1 + 1e-9) + 1e-12)


def test_gemm_bias_shapes():
    aq = fp8_quantize_rowwise(np.ones((2, 3)))
    bq = fp8_quantize_rowwise(np.ones((4, 3)))
    assert fp8_gemm_emulated(aq, bq, np.ones((2, 4))).shape == (2, 4)
    with pytest.raises(DimensionError):
        fp8_gemm_emulated(aq, bq, np.ones(3))
    with pytest.raises(DimensionError):
        fp8_gemm_emulated(aq, fp8_quantize_rowwise(np.ones((4, 2))))


def test_fp8_layer_close_to_exact():
    rng = np.random.default_rng(5)
    p = HstuLayerParams.init(16, rng, std=0.2)
    x = rng.normal(size=(9, 16))
    spec = MaskSpec.semi_local(2, 1)
    z, _ = layer_forward(x, p, spec)
    zq, _ = layer_forward(x, p, spec, fp8=True)
    assert not np.array_equal(z, zq)
    assert np.abs(zq - z).max() / np.abs(z).max() < 0.1


def test_int4_examples():
    q = int4_group_quantize([2.5, 2.5, 2.5], 3)
    assert q.scale[0] == 0 and np.array_equal(int4_group_dequantize(q), [2.5, 2.5, 2.5])
    q = int4_group_quantize([0.0, 15.0], 2)
    assert q.codes.tolist() == [0, 15]
    assert np.array_equal(int4_group_dequantize(q), [0.0, 15.0])


def test_int4_error_bound_and_partial_group():
    rng = np.random.default_rng(6)
    for g in (32, 7):
        row = rng.normal(size=512)
        q = int4_group_quantize(row, g)
        assert q.codes.max() <= 15
        err = np.abs(int4_group_dequantize(q) - row)
        gid = np.arange(512) // g
        assert np.all(err <= q.scale[gid] / 2 + 1e-15)
        assert q.n_groups == -(-512 // g)


def test_int4_half_away_from_zero():
    # value exactly halfway between codes 0 and 1 rounds up
    q = int4_group_quantize([0.0, 0.5, 15.0], 3)
    assert q.codes.tolist() == [0, 1, 15]


def test_finer_groups_tighten_the_bound():
    rng = np.random.default_rng(7)
    row = rng.normal(size=256)
    coarse = int4_group_quantize(row, 32)
    fine = int4_group_quantize(row, 16)
    # each fine group sits inside one coarse group, so its range and half-step can only shrink
    assert np.all(fine.scale <= np.repeat(coarse.scale, 2) + 1e-15)


def test_nibble_packing_round_trip():
    codes = np.random.default_rng(8).integers(0, 16, 33).astype(np.uint8)
    packed = pack_nibbles(codes)
    assert len(packed) == 17
    assert np.array_equal(unpack_nibbles(packed, 33), codes)


def test_int4_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    tables = {"item": rng.normal(size=(10, 20)), "action": rng.normal(size=(3, 20))}
    report = write_int4_tables(tmp_path / "t.int4", tables, 8)
    g, back = read_int4_tables(tmp_path / "t.int4")
    assert g == 8
    for name, t in tables.items():
        err = np.abs(back[name] - t).max()
        assert err <= report[name]["max_half_scale"] * (1 + 1e-6) + 1e-6
        assert report[name]["max_abs_error"] <= report[name]["max_half_scale"] + 1e-15
    with open(tmp_path / "bad", "wb") as fh:
        fh.write(b"nope")
    with pytest.raises(DomainError):
        read_int4_tables(tmp_path / "bad")
