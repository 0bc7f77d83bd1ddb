"""A contrario significance layer.

Pixels are tested against a background (naive) model: a centred Gaussian in
K feature channels. The number of false alarms of a pixel with whitened
residual energy ``u = ½ rᵀΣ⁻¹r`` is ``NFA = N_test · Γ(K/2, u) / Γ(K/2)``,
and the layer reports its significance ``S = -ln NFA``, computed entirely in
log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import NumericalError, ParameterError
from .numerics.layers import ConvBlock, BatchNorm2d, Layer, WindowAttention, conv1x1_constant
from .numerics.tensor import Parameter, Tensor, as_tensor
from .special import dlog_upper_incomplete_gamma_dx, log_upper_incomplete_gamma

SPHERICAL = "spherical"
ELLIPTICAL = "elliptical"
DENSE = "dense"
FORMS = (SPHERICAL, ELLIPTICAL, DENSE)

VARIANCE_FLOOR = 1e-12


@dataclass
class NaiveModel:
    """Background hypothesis: per-channel centre and a covariance in one of three forms.

    ``spherical``: Σ = λI. ``elliptical``: Σ = λΔ with Δ diagonal and |Δ| = 1.
    ``dense``: full positive-definite Σ with its Cholesky factor.
    """

    form: str
    center: np.ndarray
    n_test: int
    lam: Optional[float] = None
    delta: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    chol: Optional[np.ndarray] = None
    degenerate: bool = False

    def __post_init__(self):
        if self.form not in FORMS:
            raise ParameterError(f"unknown covariance form {self.form!r}; expected one of {FORMS}")
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.n_test < 1:
            raise ParameterError(f"n_test must be >= 1, got {self.n_test}")
        if self.form in (SPHERICAL, ELLIPTICAL) and not (self.lam and self.lam > 0):
            raise ParameterError(f"lambda must be > 0, got {self.lam}")
        if self.form == ELLIPTICAL:
            self.delta = np.asarray(self.delta, dtype=np.float64)
            if np.any(self.delta <= 0) or abs(np.prod(self.delta) - 1.0) > 1e-9:
                raise ParameterError("elliptical model needs a positive diagonal with unit determinant")
        if self.form == DENSE:
            self.sigma = np.asarray(self.sigma, dtype=np.float64)
            if self.chol is None:
                try:
                    self.chol = np.linalg.cholesky(self.sigma)
                except np.linalg.LinAlgError:
                    raise NumericalError("dense covariance is not positive definite") from None

    @property
    def K(self) -> int:
        return int(self.center.shape[0])

    @classmethod
    def from_covariance(cls, form: str, cov, center=None, n_test: int = 1) -> "NaiveModel":
        """Build a model from a known covariance (diagonal entries for the diagonal forms)."""
        cov = np.asarray(cov, dtype=np.float64)
        k = cov.shape[0]
        center = np.zeros(k) if center is None else center
        if form == DENSE:
            return cls(DENSE, center, n_test, sigma=cov if cov.ndim == 2 else np.diag(cov))
        v = np.diag(cov) if cov.ndim == 2 else cov
        if form == SPHERICAL:
            return cls(SPHERICAL, center, n_test, lam=float(np.mean(v)))
        lam = float(np.exp(np.mean(np.log(v))))
        return cls(ELLIPTICAL, center, n_test, lam=lam, delta=v / lam)

    def covariance(self) -> np.ndarray:
        if self.form == DENSE:
            return self.sigma
        if self.form == SPHERICAL:
            return self.lam * np.eye(self.K)
        return self.lam * np.diag(self.delta)

    def whitening(self) -> np.ndarray:
        """Matrix W with WᵀW = Σ⁻¹, so that ``u = ½‖W r‖²``."""
        if self.form == DENSE:
            return np.linalg.solve(self.chol, np.eye(self.K))
        if self.form == SPHERICAL:
            return np.eye(self.K) / math.sqrt(self.lam)
        return np.diag(1.0 / np.sqrt(self.lam * self.delta))


@dataclass
class SignificanceMap:
    values: Tensor  # (n, 1, h, w)
    scale_index: int = 0
    n_test: int = 1

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class ActivationConfig:
    alpha: float = 5e-4
    n_test: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if self.n_test < 1:
            raise ParameterError(f"n_test must be >= 1, got {self.n_test}")


def _as_array(features) -> np.ndarray:
    return features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)


def estimate_naive_model(features, form: str = ELLIPTICAL, n_test: Optional[int] = None) -> NaiveModel:
    """Estimate the background model from a feature batch (statistics are not differentiated).

    Centre is the per-channel median over every pixel of the batch; spread comes
    from the residual variances. Variances below 1e-12 are floored and the
    model is flagged ``degenerate``. ``n_test`` defaults to the map's pixel
    count; pass the output resolution's pixel count for maps that will be
    upsampled and fused.
    """
    x = _as_array(features)
    if x.ndim != 4:
        raise ParameterError(f"features must be (n, K, h, w), got {x.shape}")
    n, k, h, w = x.shape
    samples = x.transpose(0, 2, 3, 1).reshape(-1, k)
    if samples.shape[0] < k + 1:
        raise ParameterError(f"need at least K+1={k + 1} samples, got {samples.shape[0]}")
    if form not in FORMS:
        raise ParameterError(f"unknown covariance form {form!r}; expected one of {FORMS}")
    center = np.median(samples, axis=0)
    resid = samples - center
    var = resid.var(axis=0, ddof=1)
    degenerate = bool(np.any(var < VARIANCE_FLOOR))
    var = np.maximum(var, VARIANCE_FLOOR)
    n_test = h * w if n_test is None else int(n_test)
    if form == SPHERICAL:
        return NaiveModel(SPHERICAL, center, n_test, lam=float(var.mean()), degenerate=degenerate)
    if form == ELLIPTICAL:
        lam = float(np.exp(np.log(var).mean()))
        delta = var / lam
        delta /= np.exp(np.log(delta).mean())
        return NaiveModel(ELLIPTICAL, center, n_test, lam=lam, delta=delta, degenerate=degenerate)
    sigma = np.atleast_2d(np.cov(resid, rowvar=False))
    diag = np.maximum(np.diag(sigma), VARIANCE_FLOOR)
    sigma[np.diag_indices(k)] = diag
    sigma = sigma + 1e-4 * np.trace(sigma) / k * np.eye(k)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise NumericalError("dense covariance not positive definite after shrinkage") from None
    return NaiveModel(DENSE, center, n_test, sigma=sigma, chol=chol, degenerate=degenerate)


def significance(features, model: NaiveModel, scale_index: int = 0) -> SignificanceMap:
    """S = -ln N_test + ln Γ(K/2) - ln Γ(K/2, u), differentiable w.r.t. features."""
    x = as_tensor(features)
    if x.ndim != 4 or x.shape[1] != model.K:
        raise ParameterError(f"features have shape {x.shape}; model expects {model.K} channels")
    resid = x - model.center[None, :, None, None]
    if model.form == DENSE:
        z = conv1x1_constant(resid, model.whitening())
    else:
        z = resid * np.diag(model.whitening())[None, :, None, None]
    u = nx.tsum(nx.square(z), axis=1, keepdims=True) * 0.5
    a = model.K / 2.0
    const = -math.log(model.n_test) + math.lgamma(a)

    def forward(v):
        return const - log_upper_incomplete_gamma(a, v)

    def derivative(v, s):
        d = np.zeros_like(v)
        pos = v > 0
        if pos.any():
            d[pos] = -dlog_upper_incomplete_gamma_dx(a, v[pos], log_value=const - s[pos])
        if a == 1.0:
            d[~pos] = 1.0
        return d

    return SignificanceMap(nx.elementwise(u, forward, derivative, "significance"), scale_index, model.n_test)


def sigm_alpha(scores, cfg: ActivationConfig) -> Tensor:
    """2 / (1 + exp(-α (x + ln N_test))) - 1, evaluated as tanh(α (x + ln N_test) / 2)."""
    x = scores.values if isinstance(scores, SignificanceMap) else as_tensor(scores)
    half = 0.5 * cfg.alpha
    shift = math.log(cfg.n_test)
    return nx.elementwise(x, lambda v: np.tanh(half * (v + shift)), lambda v, y: half * (1.0 - y * y), "sigm_alpha")


def sigm_alpha_array(values: np.ndarray, alpha: float, n_test: int = 1) -> np.ndarray:
    return np.tanh(0.5 * alpha * (np.asarray(values, dtype=np.float64) + math.log(n_test)))


def threshold_interval(alpha: float, n_test: int = 1, significance_threshold: float = 500.0) -> tuple[float, float]:
    """Score interval [0, Sigm_α(S*)] in which a binarization threshold should lie.

    ``S*`` separates object significances (a few hundred and up) from the
    background (below ~30); 500 is the customary value.
    """
    upper = float(sigm_alpha_array(significance_threshold, alpha, n_test))
    return 0.0, upper


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class BasicNFABlock(Layer):
    """Two conv-bn-relu blocks followed by the significance test."""

    def __init__(self, name: str, c_in: int, k: int, form: str, rng: np.random.Generator):
        self.name = name
        self.form = form
        self.block1 = ConvBlock(f"{name}.block1", c_in, k, rng)
        self.block2 = ConvBlock(f"{name}.block2", k, k, rng)
        self.frozen_model: Optional[NaiveModel] = None  # when set, used instead of re-estimating
        self.last_model: Optional[NaiveModel] = None

    def features(self, x, train: bool) -> Tensor:
        return self.block2(self.block1(x, train), train)

    def __call__(self, x, train: bool = True, scale_index: int = 0, n_test: Optional[int] = None) -> SignificanceMap:
        feats = self.features(x, train)
        model = self.frozen_model or estimate_naive_model(feats, self.form, n_test)
        self.last_model = model
        return significance(feats, model, scale_index)


class SpatialNFABlock(Layer):
    """Conv-bn-relu, then windowed self-attention (+bn, relu), then the significance test."""

    def __init__(self, name: str, c_in: int, k: int, form: str, rng: np.random.Generator,
                 window: int = 7, heads: int = 1):
        if window % 2 == 0:
            raise ParameterError(f"attention window must be odd, got {window}")
        self.name = name
        self.form = form
        self.block1 = ConvBlock(f"{name}.block1", c_in, k, rng)
        self.attention = WindowAttention(f"{name}.attention", k, rng, window=window, heads=heads)
        self.bn = BatchNorm2d(f"{name}.bn", k)
        self.frozen_model: Optional[NaiveModel] = None
        self.last_model: Optional[NaiveModel] = None

    def features(self, x, train: bool) -> Tensor:
        return nx.relu(self.bn(self.attention(self.block1(x, train)), train))

    def __call__(self, x, train: bool = True, scale_index: int = 0, n_test: Optional[int] = None) -> SignificanceMap:
        feats = self.features(x, train)
        model = self.frozen_model or estimate_naive_model(feats, self.form, n_test)
        self.last_model = model
        return significance(feats, model, scale_index)


class ECAScaleWeights(Layer):
    """Per-scale weights in (0, 1): global average pool, 1D conv over scales, sigmoid."""

    def __init__(self, name: str, rng: np.random.Generator, k: int = 3):
        self.name = name
        self.kernel = Parameter(f"{name}.kernel", rng.normal(0.0, math.sqrt(1.0 / k), size=k) * 0.1)

    def __call__(self, maps: Sequence[SignificanceMap]) -> Tensor:
        return eca_scale_weights(maps, self.kernel)


def _stack_maps(maps: Sequence[SignificanceMap]) -> Tensor:
    shapes = {m.values.shape for m in maps}
    if len(shapes) != 1:
        raise ParameterError(f"significance maps must share a resolution, got {sorted(shapes)}")
    return nx.concat_channels([m.values for m in maps])


def eca_scale_weights(maps: Sequence[SignificanceMap], kernel) -> Tensor:
    """(n, m) weights; zero-padded 1D convolution of the pooled per-scale means."""
    if not maps:
        raise ParameterError("eca_scale_weights needs at least one map")
    pooled = nx.global_avg_pool(_stack_maps(maps))
    return nx.sigmoid(nx.conv1d(pooled, kernel))


def fuse_scales(
    maps: Sequence[SignificanceMap],
    weights: Union[None, Tensor, Sequence[float]] = None,
    reduce: str = "max",
) -> SignificanceMap:
    """Pixelwise max (union of detections) or min over the weighted significances."""
    if not maps:
        raise ParameterError("fuse_scales needs at least one map")
    if reduce not in ("max", "min"):
        raise ParameterError(f"reduce must be 'max' or 'min', got {reduce!r}")
    stacked = _stack_maps(maps)
    m = len(maps)
    if weights is not None:
        if isinstance(weights, Tensor):
            if weights.shape[-1] != m:
                raise ParameterError(f"expected {m} weights, got shape {weights.shape}")
            wt = nx.reshape(weights, (weights.shape[0] if weights.ndim == 2 else 1, m, 1, 1))
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (m,):
                raise ParameterError(f"expected {m} weights, got {w.shape}")
            wt = Tensor(w.reshape(1, m, 1, 1))
        stacked = stacked * wt
    fused = stacked if m == 1 else nx.reduce_extreme(stacked, axis=1, mode=reduce, keepdims=True)
    n_test = max(mp.n_test for mp in maps)
    return SignificanceMap(fused, scale_index=0, n_test=n_test)


def upsample_map(smap: SignificanceMap, factor: int) -> SignificanceMap:
    return SignificanceMap(nx.bilinear_upsample(smap.values, factor), smap.scale_index, smap.n_test)


def nfa_curve(x: np.ndarray, k: int = 1, n_test: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """log10 NFA and significance of a centred unit-variance K-dimensional point at radius |x|."""
    x = np.asarray(x, dtype=np.float64)
    model = NaiveModel.from_covariance(SPHERICAL, np.ones(k), n_test=n_test)
    feats = np.zeros((1, k, 1, x.size))
    feats[0, 0, 0, :] = x
    s = significance(feats, model).values.data.reshape(-1)
    return -s / math.log(10.0), s
