"""One HSTU block with exact gradients and a rematerializing backward.

Forward, per row of a jagged batch::

    normed = LayerNorm(x)
    u, v, q, k = silu(normed @ w1 + b1)          # fused projection, split in that order
    attn = attention(q, k, v)                    # multi-head, masked, SiLU scores
    y = LayerNorm_g(attn) * u
    z = y @ w2 + b2 + x                          # residual folded into the second GEMM

``cache_mode="full"`` keeps every intermediate the backward needs.
``cache_mode="minimal"`` keeps only ``x``, the input-norm statistics, ``u``
and ``attn``; :func:`layer_backward_remat` rebuilds the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.stats import truncnorm

from .attention import AttentionCache, MaskSpec, attention_backward, attention_forward, jagged_pairs
from .errors import DimensionError, StateError
from .functional import (  # noqa: F401  (re-exported)
    LN_EPS,
    layer_norm_apply,
    layer_norm_backward,
    layer_norm_forward,
    layer_norm_stats,
    silu,
    silu_grad,
)

def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=np.float64) -> np.ndarray:
    """Zero-mean normal truncated at two standard deviations; exact zeros when ``std == 0``."""
    if std == 0:
        return np.zeros(shape, dtype)
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(dtype)


FULL_CACHE_FIELDS = ("x", "ln_mean", "ln_rstd", "normed_x", "pre_u", "pre_v", "pre_q", "pre_k", "attn", "y")
MINIMAL_CACHE_FIELDS = ("x", "ln_mean", "ln_rstd", "u", "attn")


@dataclass
class HstuLayerParams:
    norm_scale: np.ndarray
    norm_bias: np.ndarray
    w1: np.ndarray  # (d, 4d) -> u, v, q, k
    b1: np.ndarray
    gnorm_scale: np.ndarray
    gnorm_bias: np.ndarray
    w2: np.ndarray  # (d, d)
    b2: np.ndarray

    @property
    def d(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float64) -> "HstuLayerParams":
        def tn(shape):
            return trunc_normal(rng, shape, std, dtype)

        return cls(
            norm_scale=np.ones(d, dtype),
            norm_bias=np.zeros(d, dtype),
            w1=tn((d, 4 * d)),
            b1=np.zeros(4 * d, dtype),
            gnorm_scale=np.ones(d, dtype),
            gnorm_bias=np.zeros(d, dtype),
            w2=tn((d, d)),
            b2=np.zeros(d, dtype),
        )

    @classmethod
    def zeros(cls, d: int, dtype=np.float64) -> "HstuLayerParams":
        return cls(*(np.zeros(s, dtype) for s in _shapes(d)))

    def named(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "HstuLayerParams":
        return HstuLayerParams(**{k: v.copy() for k, v in self.named().items()})


def _shapes(d):
    return [(d,), (d,), (d, 4 * d), (4 * d,), (d,), (d,), (d, d), (d,)]


@dataclass
class LayerCache:
    mode: str
    tensors: dict
    spec: MaskSpec
    offsets: np.ndarray
    num_heads: int
    norm: bool
    fp8: bool = False

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]


def cache_bytes(mode: str, L: int, d: int, itemsize: int = 8) -> int:
    """Bytes a cache of the given mode holds for an ``L x d`` input."""
    if mode == "full":
        return itemsize * (8 * L * d + 2 * L)  # x, normed_x, 4 pre-activations, attn, y + stats
    if mode == "minimal":
        return itemsize * (3 * L * d + 2 * L)  # x, u, attn + stats
    raise ValueError(f"unknown cache mode {mode!r}")


def _gemm(a, w, bias, fp8: bool):
    if fp8:
        from .numerics import fp8_linear

        return fp8_linear(a, w, bias)
    return a @ w + bias


def _project(normed, params, fp8):
    return _gemm(normed, params.w1, params.b1, fp8)


def layer_forward(
    x,
    params: HstuLayerParams,
    spec: MaskSpec = MaskSpec(),
    cache_mode: str = "full",
    offsets=None,
    num_heads: int = 1,
    norm: bool = True,
    fp8: bool = False,
):
    """Run one block over ``x`` (``(N, d)``; one sequence unless ``offsets`` given).

    Returns ``(z, cache)``. ``fp8`` routes both GEMMs through the emulated
    e4m3 path; everything else stays in the input precision.
    """
    x = np.asarray(x)
    d = params.d
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionError(f"x must be (N, {d}), got {x.shape}")
    offsets = np.array([0, x.shape[0]]) if offsets is None else np.asarray(offsets)
    mean, rstd = layer_norm_stats(x)
    normed = layer_norm_apply(x, mean, rstd, params.norm_scale, params.norm_bias)
    h = _project(normed, params, fp8)
    act = silu(h)
    u, v, q, k = act[:, :d], act[:, d : 2 * d], act[:, 2 * d : 3 * d], act[:, 3 * d :]
    attn, _ = attention_forward(q, k, v, spec, norm, offsets, num_heads)
    attn_normed, _ = layer_norm_forward(attn, params.gnorm_scale, params.gnorm_bias)
    y = attn_normed * u
    if fp8:
        z = _gemm(y, params.w2, x + params.b2, fp8=True)
    else:
        z = y @ params.w2 + params.b2 + x

    if cache_mode == "full":
        tensors = {
            "x": x,
            "ln_mean": mean,
            "ln_rstd": rstd,
            "normed_x": normed,
            "pre_u": h[:, :d],
            "pre_v": h[:, d : 2 * d],
            "pre_q": h[:, 2 * d : 3 * d],
            "pre_k": h[:, 3 * d :],
            "attn": attn,
            "y": y,
        }
    elif cache_mode == "minimal":
        tensors = {"x": x, "ln_mean": mean, "ln_rstd": rstd, "u": np.ascontiguousarray(u), "attn": attn}
    else:
        raise ValueError(f"unknown cache mode {cache_mode!r}")
    return z, LayerCache(cache_mode, tensors, spec, offsets, num_heads, norm, fp8)


def _backward_core(dz, params, cache, normed, h, y):
    d = params.d
    x, mean, rstd, attn = cache["x"], cache["ln_mean"], cache["ln_rstd"], cache["attn"]
    dy = dz @ params.w2.T
    dw2 = y.T @ dz
    db2 = dz.sum(axis=0)

    act = silu(h)
    u, v, q, k = act[:, :d], act[:, d : 2 * d], act[:, 2 * d : 3 * d], act[:, 3 * d :]
    attn_normed, (g_mean, g_rstd) = layer_norm_forward(attn, params.gnorm_scale, params.gnorm_bias)
    du = dy * attn_normed
    dattn, dgscale, dgbias = layer_norm_backward(dy * u, attn, g_mean, g_rstd, params.gnorm_scale)

    pairs = jagged_pairs(cache.spec, cache.offsets, cache.norm)
    acache = AttentionCache(q, k, v, cache.spec, cache.offsets, cache.num_heads, cache.norm, pairs)
    dq, dk, dv = attention_backward(dattn, acache)

    dh = np.concatenate([du, dv, dq, dk], axis=1) * silu_grad(h)
    dnormed = dh @ params.w1.T
    dw1 = normed.T @ dh
    db1 = dh.sum(axis=0)
    dx, dnscale, dnbias = layer_norm_backward(dnormed, x, mean, rstd, params.norm_scale)
    dx = dx + dz
    grads = HstuLayerParams(dnscale, dnbias, dw1, db1, dgscale, dgbias, dw2, db2)
    return dx, grads


def layer_backward(dz, cache: LayerCache, params: HstuLayerParams):
    """Exact ``(dx, dparams)`` from a full cache."""
    if cache.mode != "full":
        raise StateError(f"layer_backward needs a full cache, got {cache.mode!r}")
    h = np.concatenate([cache["pre_u"], cache["pre_v"], cache["pre_q"], cache["pre_k"]], axis=1)
    return _backward_core(np.asarray(dz), params, cache, cache["normed_x"], h, cache["y"])


def layer_backward_remat(dz, cache: LayerCache, params: HstuLayerParams):
    """Same result as :func:`layer_backward`, rebuilding dropped tensors from a minimal cache."""
    if cache.mode != "minimal":
        raise StateError(f"layer_backward_remat needs a minimal cache, got {cache.mode!r}")
    x, mean, rstd = cache["x"], cache["ln_mean"], cache["ln_rstd"]
    normed = layer_norm_apply(x, mean, rstd, params.norm_scale, params.norm_bias)
    h = _project(normed, params, cache.fp8)
    attn_normed, _ = layer_norm_forward(cache["attn"], params.gnorm_scale, params.gnorm_bias)
    y = attn_normed * cache["u"]
    return _backward_core(np.asarray(dz), params, cache, normed, h, y)


def backward(dz, cache: LayerCache, params: HstuLayerParams):
    """Dispatch on the cache mode."""
    if cache.mode == "minimal":
        return layer_backward_remat(dz, cache, params)
    return layer_backward(dz, cache, params)
