import numpy as np
import pytest

from ultrahstu.attention import MaskSpec
from ultrahstu.errors import DimensionError, StateError
from ultrahstu.functional import layer_norm_backward, layer_norm_forward
from ultrahstu.hstu_core import (
    FULL_CACHE_FIELDS,
    MINIMAL_CACHE_FIELDS,
    HstuLayerParams,
    cache_bytes,
    layer_backward,
    layer_backward_remat,
    layer_forward,
    silu,
    silu_grad,
)


def test_silu_values():
    assert silu(0.0) == 0.0
    assert abs(silu(20.0) - 20.0) < 1e-7 * 20
    for x in (-2.0, -0.5, 1.3):
        eps = 1e-6
        num = (silu(x + eps) - silu(x - eps)) / (2 * eps)
        assert abs(num - silu_grad(x)) < 1e-9


def test_layer_norm_examples():
    scale, bias = np.full(4, 2.0), np.array([1.0, -1.0, 0.5, 0.0])
    out, _ = layer_norm_forward(np.full((1, 4), 3.0), scale, bias)
    assert np.allclose(out[0], bias)
    row = np.array([[-1.0, 1.0, -1.0, 1.0]])
    out, _ = layer_norm_forward(row, np.ones(4), np.zeros(4))
    assert np.allclose(out, row, atol=1e-5)


def test_layer_norm_backward_fd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 8))
    scale, bias, probe = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(5, 8))
    out, (mean, rstd) = layer_norm_forward(x, scale, bias)
    dx, ds, db = layer_norm_backward(probe, x, mean, rstd, scale)
    eps = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        num = ((layer_norm_forward(xp, scale, bias)[0] - layer_norm_forward(xm, scale, bias)[0]) * probe).sum()
        num /= 2 * eps
        assert abs(num - dx[idx]) <= 1e-6 * max(1.0, abs(num))
    assert np.allclose(db, probe.sum(0))


def scalar_layer_oracle(x, p, norm_c=1.0, eps=1e-6):
    """Straight-line evaluation for a single position (L = 1)."""
    d = x.size

    def ln(v, s, b):
        m = sum(v) / d
        var = sum((vi - m) ** 2 for vi in v) / d
        return [(vi - m) / np.sqrt(var + eps) * s[i] + b[i] for i, vi in enumerate(v)]

    n = ln(list(x), p.norm_scale, p.norm_bias)
    h = [sum(n[i] * p.w1[i, j] for i in range(d)) + p.b1[j] for j in range(4 * d)]
    a = [hj / (1 + np.exp(-hj)) for hj in h]
    u, v, q, k = a[:d], a[d : 2 * d], a[2 * d : 3 * d], a[3 * d :]
    s = sum(qi * ki for qi, ki in zip(q, k))
    w = s / (1 + np.exp(-s)) * norm_c
    attn = [w * vi for vi in v]
    g = ln(attn, p.gnorm_scale, p.gnorm_bias)
    y = [gi * ui for gi, ui in zip(g, u)]
    return np.array([sum(y[i] * p.w2[i, j] for i in range(d)) + p.b2[j] + x[j] for j in range(d)])


def test_single_position_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    p = HstuLayerParams.init(6, rng, std=0.5)
    p.b1[:] = rng.normal(size=24) * 0.1
    x = rng.normal(size=(1, 6))
    z, _ = layer_forward(x, p)
    assert np.allclose(z[0], scalar_layer_oracle(x[0], p), atol=1e-12)


def test_zero_weights_are_identity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, 8))
    z, cache = layer_forward(x, HstuLayerParams.zeros(8), MaskSpec.semi_local(2, 1))
    assert np.array_equal(z, x)
    dz = rng.normal(size=x.shape)
    p = HstuLayerParams.zeros(8)
    dx, _ = layer_backward(dz, cache, p)
    assert np.array_equal(dx, dz)


def test_dz_zero_gives_zero_grads():
    rng = np.random.default_rng(3)
    p = HstuLayerParams.init(8, rng)
    x = rng.normal(size=(5, 8))
    for mode, fn in (("full", layer_backward), ("minimal", layer_backward_remat)):
        _, cache = layer_forward(x, p, cache_mode=mode)
        dx, g = fn(np.zeros_like(x), cache, p)
        assert not dx.any()
        assert not any(v.any() for v in g.named().values())


def _probe_loss(x, p, probe, spec, heads, offsets=None):
    return float((layer_forward(x, p, spec, "full", offsets, heads)[0] * probe).sum())


@pytest.mark.parametrize("spec", [MaskSpec.full_causal(), MaskSpec.semi_local(1, 1)])
def test_backward_matches_finite_differences(spec):
    rng = np.random.default_rng(4)
    d, L, heads = 8, 5, 2
    p = HstuLayerParams.init(d, rng, std=0.3)
    p.norm_bias[:] = rng.normal(size=d) * 0.1
    x = rng.normal(size=(L, d))
    probe = rng.normal(size=(L, d))
    _, cache = layer_forward(x, p, spec, "full", None, heads)
    dx, grads = layer_backward(probe, cache, p)
    eps = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        num = (_probe_loss(xp, p, probe, spec, heads) - _probe_loss(xm, p, probe, spec, heads)) / (2 * eps)
        assert abs(num - dx[idx]) <= 1e-5 * max(1.0, abs(num))
    for name, arr in p.named().items():
        g = grads.named()[name]
        for idx in np.ndindex(arr.shape):
            q = p.copy()
            q.named()[name][idx] += eps
            fp = _probe_loss(x, q, probe, spec, heads)
            q.named()[name][idx] -= 2 * eps
            fm = _probe_loss(x, q, probe, spec, heads)
            num = (fp - fm) / (2 * eps)
            assert abs(num - g[idx]) <= 1e-5 * max(1.0, abs(num)), name


def test_remat_is_bitwise_equal_on_jagged_batch():
    rng = np.random.default_rng(5)
    p = HstuLayerParams.init(12, rng, std=0.2)
    offsets = np.array([0, 4, 4, 13])
    x = rng.normal(size=(13, 12))
    spec = MaskSpec.semi_local(2, 2, "end")
    z_full, c_full = layer_forward(x, p, spec, "full", offsets, 3)
    z_min, c_min = layer_forward(x, p, spec, "minimal", offsets, 3)
    assert np.array_equal(z_full, z_min)
    dz = rng.normal(size=x.shape)
    dx1, g1 = layer_backward(dz, c_full, p)
    dx2, g2 = layer_backward_remat(dz, c_min, p)
    assert np.array_equal(dx1, dx2)
    for k in g1.named():
        assert np.array_equal(g1.named()[k], g2.named()[k])


def test_cache_variants_and_errors():
    rng = np.random.default_rng(6)
    p = HstuLayerParams.init(4, rng)
    x = rng.normal(size=(3, 4))
    _, full = layer_forward(x, p, cache_mode="full")
    _, mini = layer_forward(x, p, cache_mode="minimal")
    assert tuple(full.tensors) == FULL_CACHE_FIELDS
    assert tuple(mini.tensors) == MINIMAL_CACHE_FIELDS
    dropped = set(FULL_CACHE_FIELDS) - set(MINIMAL_CACHE_FIELDS)
    assert dropped == {"normed_x", "pre_u", "pre_v", "pre_q", "pre_k", "y"}
    with pytest.raises(StateError):
        layer_backward(np.zeros_like(x), mini, p)
    with pytest.raises(StateError):
        layer_backward_remat(np.zeros_like(x), full, p)
    with pytest.raises(DimensionError):
        layer_forward(np.zeros((3, 5)), p)


def test_cache_byte_accounting():
    rng = np.random.default_rng(7)
    p = HstuLayerParams.init(8, rng)
    x = rng.normal(size=(10, 8))
    _, full = layer_forward(x, p, cache_mode="full")
    _, mini = layer_forward(x, p, cache_mode="minimal")
    assert full.nbytes == cache_bytes("full", 10, 8)
    assert mini.nbytes == cache_bytes("minimal", 10, 8)
    ratio = cache_bytes("minimal", 3072, 512) / cache_bytes("full", 3072, 512)
    assert ratio <= 0.40
    assert abs(ratio - 2.3 / 7) <= 0.07


def test_stacked_zero_output_projection_is_identity():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(6, 8))
    z = x
    for _ in range(4):
        p = HstuLayerParams.init(8, rng)
        p.w2[:] = 0.0
        z, _ = layer_forward(z, p, MaskSpec.semi_local(1, 1))
    assert np.array_equal(z, x)


def test_init_statistics():
    p = HstuLayerParams.init(64, np.random.default_rng(9))
    assert np.abs(p.w1).max() <= 0.04
    assert abs(p.w1.std() - 0.02 * 0.88) < 0.002  # truncation at 2 sigma shrinks the std
    assert np.array_equal(p.norm_scale, np.ones(64))
