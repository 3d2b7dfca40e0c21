"""Normalized entropy, an analytic FLOP model, and scaling-law fits.

NE is the mean binary cross-entropy of the predictions divided by that of a
constant predictor at the empirical base rate; 1.0 means "no better than the
marginal", lower is better.

The FLOP model counts multiply-adds as two FLOPs. Per HSTU block on ``L``
rows of width ``d``: the fused projection costs ``2 L d (4d)``, the output
projection ``2 L d d``, and attention ``4 d nnz`` where ``nnz`` is the number
of allowed query/key pairs (one ``QK`` dot and one ``AV`` accumulation per
pair). Training is counted as three forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import mask_nnz
from .errors import DomainError

NE_CLAMP = 1e-7
TRAIN_MULTIPLIER = 3  # forward + backward at ~2x forward
POINTWISE_PER_SCORE = 5  # silu (4) plus the 1/L scale, per pair and head


def _bce(labels, preds):
    return -(labels * np.log(preds) + (1.0 - labels) * np.log1p(-preds))


def normalized_entropy(labels, preds, clamp: float = NE_CLAMP) -> float:
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    if labels.shape != preds.shape:
        raise DomainError(f"{labels.size} labels but {preds.size} predictions")
    if labels.size == 0:
        raise DomainError("NE of an empty label vector is undefined")
    p = labels.mean()
    if p <= 0.0 or p >= 1.0:
        raise DomainError("NE needs both positive and negative labels")
    preds = np.clip(preds, clamp, 1.0 - clamp)
    numerator = _bce(labels, preds).mean()
    denominator = -(p * np.log(p) + (1.0 - p) * np.log1p(-p))
    return float(numerator / denominator)


def binary_entropy(p) -> float:
    """Entropy in nats of a Bernoulli(p); 0 at the endpoints."""
    p = float(p)
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-(p * np.log(p) + (1.0 - p) * np.log1p(-p)))


def relative_metric(delta_percent) -> np.ndarray:
    """Turn a relative change in percent (e.g. -0.34) into a ratio to baseline (0.9966)."""
    return 1.0 + np.asarray(delta_percent, dtype=np.float64) / 100.0


# ---------------------------------------------------------------------------
# FLOP model


@dataclass
class StageFlops:
    branch: str
    stage: int
    length: int
    n_layers: int
    gemm: float
    attention: float
    pointwise: float

    @property
    def total(self) -> float:
        return self.gemm + self.attention + self.pointwise


@dataclass
class FlopReport:
    stages: list = field(default_factory=list)
    fusion: float = 0.0
    head: float = 0.0

    @property
    def gemm(self) -> float:
        return sum(s.gemm for s in self.stages) + self.fusion + self.head

    @property
    def attention(self) -> float:
        return sum(s.attention for s in self.stages)

    @property
    def pointwise(self) -> float:
        return sum(s.pointwise for s in self.stages)

    @property
    def inference(self) -> float:
        return self.gemm + self.attention + self.pointwise

    @property
    def train(self) -> float:
        return TRAIN_MULTIPLIER * self.inference

    def to_dict(self) -> dict:
        return {
            "gemm": self.gemm,
            "attention": self.attention,
            "pointwise": self.pointwise,
            "inference": self.inference,
            "train": self.train,
            "stages": [vars(s) | {"total": s.total} for s in self.stages],
        }


def layer_flops(L: int, d: int, num_heads: int, spec) -> tuple[float, float, float]:
    """``(gemm, attention, pointwise)`` FLOPs of one block on ``L`` rows."""
    nnz = mask_nnz(spec, L)
    gemm = 2.0 * L * d * 4 * d + 2.0 * L * d * d
    attention = 4.0 * d * nnz  # d_h * H == d
    pointwise = float(POINTWISE_PER_SCORE * num_heads * nnz)
    return gemm, attention, pointwise


def flops_model(config, L, n_candidates: int = 1) -> FlopReport:
    """Per-example FLOPs of ``config`` on sequences of length ``L``.

    ``L`` is an int, or a dict keyed by branch source for MoT models.
    """
    report = FlopReport()
    d, h = config.d, config.num_heads
    for branch in config.branches:
        length = L[branch.key] if isinstance(L, dict) else L
        if length < 0:
            raise DomainError(f"sequence length must be >= 0, got {length}")
        for si, stage in enumerate(branch.stages):
            if stage.truncate is not None:
                length = min(length, stage.truncate)
            g, a, p = layer_flops(length, d, h, stage.mask)
            n = stage.n_layers
            report.stages.append(StageFlops(branch.name, si, length, n, n * g, n * a, n * p))
    if config.fused:
        report.fusion = 2.0 * n_candidates * len(config.branches) * d * d
    report.head = 2.0 * n_candidates * d * config.task_count
    return report


# ---------------------------------------------------------------------------
# scaling fits


def _points(points):
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DomainError("points must be a sequence of (compute, metric) pairs")
    if arr.shape[0] < 2:
        raise DomainError("a fit needs at least two points")
    if np.any(arr[:, 0] <= 0):
        raise DomainError("compute values must be > 0")
    return arr


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    points: np.ndarray

    def predict(self, c):
        return self.slope * np.asarray(c) + self.intercept

    @property
    def residuals(self) -> np.ndarray:
        return self.points[:, 1] - self.predict(self.points[:, 0])

    def to_dict(self) -> dict:
        return {"kind": "linear", "slope": self.slope, "intercept": self.intercept,
                "residuals": self.residuals.tolist()}


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    beta: float
    points: np.ndarray

    def predict(self, c):
        return self.alpha * np.asarray(c, dtype=np.float64) ** (-self.beta)

    @property
    def residuals(self) -> np.ndarray:
        # in log space, where the fit is least squares
        return np.log(self.points[:, 1]) - np.log(self.predict(self.points[:, 0]))

    def to_dict(self) -> dict:
        return {"kind": "power_law", "alpha": self.alpha, "beta": self.beta,
                "residuals": self.residuals.tolist()}


def _ols(x, y):
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-300:
        raise DomainError("compute values have no variance; slope is undefined")
    slope = float(xc @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * x.mean())


def fit_linear_scaling(points) -> LinearFit:
    """Ordinary least squares of metric on compute."""
    arr = _points(points)
    slope, intercept = _ols(arr[:, 0], arr[:, 1])
    return LinearFit(slope, intercept, arr)


def efficiency_ratio(fit_a: LinearFit, fit_b: LinearFit) -> float:
    """How many times steeper ``fit_a`` improves the metric per unit compute than ``fit_b``."""
    if fit_b.slope == 0:
        raise DomainError("reference fit has zero slope")
    return fit_a.slope / fit_b.slope


def fit_power_law(points) -> PowerLawFit:
    """``L = alpha * C**(-beta)`` by least squares on ``log L`` vs ``log C``."""
    arr = _points(points)
    if np.any(arr[:, 1] <= 0):
        raise DomainError("power-law fits need positive metric values")
    slope, intercept = _ols(np.log(arr[:, 0]), np.log(arr[:, 1]))
    return PowerLawFit(float(np.exp(intercept)), -slope, arr)


def exponent_ratio(fit_a: PowerLawFit, fit_b: PowerLawFit) -> float:
    if fit_b.beta == 0:
        raise DomainError("reference fit has zero exponent")
    return fit_a.beta / fit_b.beta


def corrected_exponent(beta_hat: float, loss: float, loss_inf: float) -> float:
    """True exponent from one fitted without an irreducible term: ``beta_hat / (1 - L_inf / L)``."""
    if loss <= 0 or loss_inf < 0 or loss_inf >= loss:
        raise DomainError("need 0 <= L_inf < L")
    return beta_hat / (1.0 - loss_inf / loss)


def compute_advantage(beta_improved: float, beta_base: float) -> float:
    """Exponent ``k`` with ``C_base = C_improved ** k`` at equal loss (shared prefactor)."""
    if beta_improved <= 0 or beta_base <= 0:
        raise DomainError("exponents must be > 0")
    return beta_improved / beta_base


def matched_compute(c: float, k: float) -> float:
    """Compute the base model needs to match the improved one at budget ``c``."""
    if c <= 0:
        raise DomainError("compute must be > 0")
    return float(c**k)
