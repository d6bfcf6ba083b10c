"""Latent fields, reservoir transforms, the AVO likelihood and the synthetic problem.

The latent state is three Gaussian fields ``x_g, x_o, x_clay`` on the grid.
Saturations follow a softmax with brine as the reference class, clay content
a logistic.  The likelihood is Gaussian per cell with a fixed 2x2 covariance
``Omega_0`` for ``(R0, G)``; cells are conditionally independent.

The rock-physics forward model of the real field is not available, so
:class:`SyntheticForward` provides a smooth, nonlinear stand-in with
interactions.  Its coefficients are configuration, not physics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .grf_fft import (
    CirculantBase,
    CorrelationSpec,
    GridSpec,
    build_base,
    log_density_constant,
    log_density_quadform,
    sample_field,
)

FIELD_NAMES = ("x_g", "x_o", "x_clay")
QUANTITIES = ("S_g", "S_o", "S_b", "V_clay")
COVARIATES = ("x_g", "x_o", "x_clay", "depth_norm")

DEFAULT_A = (0.02, -0.12, -0.06, 0.08, 0.05, 0.03)
DEFAULT_B = (-0.05, 0.20, 0.10, -0.12, -0.08, -0.10)


def _field(values, grid: GridSpec | None = None, name: str = "field") -> np.ndarray:
    v = np.asarray(values, dtype=float).ravel()
    if grid is not None and v.size != grid.size:
        raise ValueError(f"{name} has length {v.size}, expected {grid.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True, eq=False)
class LatentState:
    x_g: np.ndarray
    x_o: np.ndarray
    x_clay: np.ndarray

    def __post_init__(self):
        for name in FIELD_NAMES:
            object.__setattr__(self, name, _field(getattr(self, name), name=name))
        if not (self.x_g.size == self.x_o.size == self.x_clay.size):
            raise ValueError("latent fields must share one grid")

    @classmethod
    def from_array(cls, arr) -> "LatentState":
        arr = np.asarray(arr, dtype=float)
        arr = arr.reshape(3, -1)
        return cls(arr[0], arr[1], arr[2])

    def to_array(self) -> np.ndarray:
        """Stacked ``(3, N)`` copy in the order x_g, x_o, x_clay."""
        return np.stack([self.x_g, self.x_o, self.x_clay])


@dataclass(frozen=True, eq=False)
class ReservoirState:
    S_g: np.ndarray
    S_o: np.ndarray
    S_b: np.ndarray
    V_clay: np.ndarray

    def get(self, quantity: str) -> np.ndarray:
        if quantity not in QUANTITIES:
            raise KeyError(f"unknown quantity {quantity!r}; expected one of {QUANTITIES}")
        return getattr(self, quantity)


@dataclass(frozen=True, eq=False)
class AVOObservation:
    R0: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R0", _field(self.R0, name="R0"))
        object.__setattr__(self, "G", _field(self.G, name="G"))
        if self.R0.size != self.G.size:
            raise ValueError("R0 and G must have the same length")


@dataclass(frozen=True)
class NoiseSpec:
    """Per-cell noise of ``(R0, G)``: variances and their correlation."""

    var_r0: float
    var_g: float
    corr: float

    def __post_init__(self):
        if self.var_r0 < 0 or self.var_g < 0:
            raise ValueError("noise variances must be non-negative")
        if not -1.0 <= self.corr <= 1.0:
            raise ValueError("noise correlation must lie in [-1, 1]")

    @property
    def cov(self) -> float:
        return self.corr * math.sqrt(self.var_r0 * self.var_g)

    @property
    def matrix(self) -> np.ndarray:
        c = self.cov
        return np.array([[self.var_r0, c], [c, self.var_g]])

    @property
    def det(self) -> float:
        return self.var_r0 * self.var_g * (1.0 - self.corr**2)

    @property
    def is_positive_definite(self) -> bool:
        return self.var_r0 > 0 and self.var_g > 0 and abs(self.corr) < 1 and self.det > 0

    def check_positive_definite(self) -> None:
        if not self.is_positive_definite:
            raise ValueError(f"noise covariance is not positive definite: {self}")

    @classmethod
    def from_matrix(cls, m) -> "NoiseSpec":
        m = np.asarray(m, dtype=float)
        vr, vg, c = m[0, 0], m[1, 1], 0.5 * (m[0, 1] + m[1, 0])
        corr = c / math.sqrt(vr * vg) if vr > 0 and vg > 0 else 0.0
        return cls(float(vr), float(vg), float(corr))


DEFAULT_NOISE = NoiseSpec(var_r0=0.003, var_g=0.03, corr=-0.6)


@dataclass(frozen=True)
class MeanTrend:
    """Piecewise-linear prior mean as a function of normalised depth."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple(sorted((float(d), float(v)) for d, v in self.points))
        if not pts:
            raise ValueError("a mean trend needs at least one point")
        object.__setattr__(self, "points", pts)

    def __call__(self, depth_norm):
        d = np.asarray(depth_norm, dtype=float)
        xs = [p[0] for p in self.points]
        ys = [p[1] for p in self.points]
        return np.interp(d, xs, ys)


DEFAULT_TRENDS = {
    "x_g": MeanTrend(((0.0, 1.0), (1.0, -3.0))),
    "x_o": MeanTrend(((0.0, 0.5), (1.0, -2.5))),
    "x_clay": MeanTrend(((0.0, -1.0), (1.0, -1.0))),
}


@dataclass(frozen=True, eq=False)
class DepthField:
    depth: np.ndarray
    d_min: float
    d_max: float

    def __post_init__(self):
        object.__setattr__(self, "depth", _field(self.depth, name="depth"))
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        if self.depth.min() < self.d_min or self.depth.max() > self.d_max:
            raise ValueError("depths must lie in [d_min, d_max]")

    def normalized(self) -> np.ndarray:
        return (self.depth - self.d_min) / (self.d_max - self.d_min)


@dataclass(frozen=True, eq=False)
class PriorSpec:
    grid: GridSpec
    mu_g: np.ndarray
    mu_o: np.ndarray
    mu_clay: np.ndarray
    corr_g: CorrelationSpec
    corr_o: CorrelationSpec
    corr_clay: CorrelationSpec

    def __post_init__(self):
        for name in ("mu_g", "mu_o", "mu_clay"):
            object.__setattr__(self, name, _field(getattr(self, name), self.grid, name))

    @property
    def means(self) -> np.ndarray:
        return np.stack([self.mu_g, self.mu_o, self.mu_clay])

    @property
    def correlations(self) -> tuple[CorrelationSpec, CorrelationSpec, CorrelationSpec]:
        return (self.corr_g, self.corr_o, self.corr_clay)

    @property
    def mean_state(self) -> LatentState:
        return LatentState(self.mu_g, self.mu_o, self.mu_clay)

    def build_bases(self) -> tuple[CirculantBase, CirculantBase, CirculantBase]:
        return tuple(build_base(self.grid, c) for c in self.correlations)


# --------------------------------------------------------------------------
# logistic transforms


def _softmax_brine(x_g, x_o):
    x_g = np.asarray(x_g, dtype=float)
    x_o = np.asarray(x_o, dtype=float)
    m = np.maximum(0.0, np.maximum(x_g, x_o))
    eg = np.exp(x_g - m)
    eo = np.exp(x_o - m)
    eb = np.exp(-m)
    denom = eg + eo + eb
    return eg / denom, eo / denom, eb / denom


def _logistic(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def saturations(x_g, x_o, x_clay):
    """Array version of the logistic transforms: returns ``(S_g, S_o, S_b, V_clay)``."""
    s_g, s_o, s_b = _softmax_brine(x_g, x_o)
    return s_g, s_o, s_b, _logistic(x_clay)


def to_reservoir(latent: LatentState) -> ReservoirState:
    return ReservoirState(*saturations(latent.x_g, latent.x_o, latent.x_clay))


def to_latent(res: ReservoirState) -> LatentState:
    s_g, s_o, s_b, v = (np.asarray(a, dtype=float) for a in (res.S_g, res.S_o, res.S_b, res.V_clay))
    for name, a in zip(QUANTITIES, (s_g, s_o, s_b, v)):
        if np.any(a <= 0) or np.any(a >= 1):
            raise ValueError(f"{name} must lie strictly inside (0, 1)")
    if np.max(np.abs(s_g + s_o + s_b - 1.0)) > 1e-9:
        raise ValueError("saturations must sum to one")
    return LatentState(np.log(s_g / s_b), np.log(s_o / s_b), np.log(v / (1.0 - v)))


class SaturationTransformer(TransformerMixin, BaseEstimator):
    """Maps rows ``(x_g, x_o, x_clay)`` to ``(S_g, S_o, S_b, V_clay)`` and back.

    Stateless; ``fit`` only records the number of input features.
    """

    def fit(self, X, y=None):
        X = check_array(X)
        if X.shape[1] != 3:
            raise ValueError("expected 3 latent columns (x_g, x_o, x_clay)")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        X = check_array(X)
        if X.shape[1] != 3:
            raise ValueError("expected 3 latent columns (x_g, x_o, x_clay)")
        return np.column_stack(saturations(X[:, 0], X[:, 1], X[:, 2]))

    def inverse_transform(self, R):
        R = check_array(R)
        if R.shape[1] != 4:
            raise ValueError("expected 4 columns (S_g, S_o, S_b, V_clay)")
        lat = to_latent(ReservoirState(R[:, 0], R[:, 1], R[:, 2], R[:, 3]))
        return np.column_stack([lat.x_g, lat.x_o, lat.x_clay])


# --------------------------------------------------------------------------
# synthetic forward model


@dataclass(frozen=True)
class ForwardCoefficients:
    a: tuple[float, ...] = DEFAULT_A
    b: tuple[float, ...] = DEFAULT_B

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        if len(a) != 6 or len(b) != 6:
            raise ValueError("forward coefficient vectors must have 6 entries each")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)


def synthetic_forward(x_g: float, x_o: float, x_clay: float, depth_norm: float,
                      coeffs: ForwardCoefficients = ForwardCoefficients()) -> tuple[float, float]:
    """One-cell evaluation of the synthetic stand-in forward model.

    r0 = a0 + a1 S_g + a2 S_o + a3 V (1 - d) + a4 S_g V + a5 tanh(2d - 1)
    g  = b0 + b1 S_g + b2 S_o + b3 V + b4 S_o d + b5 S_g^2
    """
    m = max(0.0, x_g, x_o)
    eg, eo, eb = math.exp(x_g - m), math.exp(x_o - m), math.exp(-m)
    denom = eg + eo + eb
    s_g, s_o = eg / denom, eo / denom
    if x_clay >= 0:
        v = 1.0 / (1.0 + math.exp(-x_clay))
    else:
        e = math.exp(x_clay)
        v = e / (1.0 + e)
    d = depth_norm
    a, b = coeffs.a, coeffs.b
    r0 = a[0] + a[1] * s_g + a[2] * s_o + a[3] * v * (1 - d) + a[4] * s_g * v + a[5] * math.tanh(2 * d - 1)
    g = b[0] + b[1] * s_g + b[2] * s_o + b[3] * v + b[4] * s_o * d + b[5] * s_g * s_g
    return r0, g


class SyntheticForward:
    """Vectorised synthetic forward model on covariate rows ``(x_g, x_o, x_clay, depth_norm)``."""

    def __init__(self, coeffs: ForwardCoefficients = ForwardCoefficients()):
        self.coeffs = coeffs

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        s_g, s_o, _, v = saturations(X[:, 0], X[:, 1], X[:, 2])
        d = X[:, 3]
        a, b = self.coeffs.a, self.coeffs.b
        r0 = a[0] + a[1] * s_g + a[2] * s_o + a[3] * v * (1 - d) + a[4] * s_g * v + a[5] * np.tanh(2 * d - 1)
        g = b[0] + b[1] * s_g + b[2] * s_o + b[3] * v + b[4] * s_o * d + b[5] * s_g**2
        return np.column_stack([r0, g])

    def evaluate_pointwise(self, X) -> np.ndarray:
        """Loop over rows calling :func:`synthetic_forward` once per cell."""
        X = np.asarray(X, dtype=float)
        out = np.empty((X.shape[0], 2))
        for i, row in enumerate(X):
            out[i] = synthetic_forward(row[0], row[1], row[2], row[3], self.coeffs)
        return out


class SurrogateForward:
    """Forward model backed by two fitted regressors, one per AVO attribute."""

    def __init__(self, r0_model, g_model):
        self.r0_model = r0_model
        self.g_model = g_model

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.column_stack([self.r0_model.predict(X), self.g_model.predict(X)])


ForwardModel = Callable[[np.ndarray], np.ndarray]


def covariates(latent: LatentState, depth_norm) -> np.ndarray:
    return np.column_stack([latent.x_g, latent.x_o, latent.x_clay, np.asarray(depth_norm, dtype=float)])


def forward_observation(forward: ForwardModel, latent: LatentState, depth_norm) -> AVOObservation:
    out = forward(covariates(latent, depth_norm))
    return AVOObservation(out[:, 0], out[:, 1])


# --------------------------------------------------------------------------
# likelihood and prior


def log_likelihood(y: AVOObservation, pred: AVOObservation, noise: NoiseSpec) -> float:
    """Bivariate Gaussian log-density summed over cells, normalising constants included."""
    if y.R0.size != pred.R0.size:
        raise ValueError("observation and prediction grids differ")
    noise.check_positive_definite()
    return _loglik_residuals(y.R0 - pred.R0, y.G - pred.G, noise)


def _loglik_residuals(e_r0, e_g, noise: NoiseSpec) -> float:
    prec = np.linalg.inv(noise.matrix)
    quad = prec[0, 0] * e_r0 * e_r0 + 2 * prec[0, 1] * e_r0 * e_g + prec[1, 1] * e_g * e_g
    n = np.size(e_r0)
    return float(-0.5 * np.sum(quad) - n * math.log(2 * math.pi) - 0.5 * n * math.log(noise.det))


def adjusted_noise(noise: NoiseSpec, resid_r0: Sequence[float], resid_g: Sequence[float]) -> NoiseSpec:
    """Inflate ``Omega_0`` by the empirical second moments of surrogate residuals."""
    r = np.asarray(resid_r0, dtype=float)
    g = np.asarray(resid_g, dtype=float)
    if r.shape != g.shape or r.ndim != 1:
        raise ValueError("residual sequences must be 1-D and of equal length")
    if r.size < 2:
        raise ValueError("need at least two residuals")
    n = r.size
    m = noise.matrix + np.array([[r @ r, r @ g], [r @ g, g @ g]]) / n
    out = NoiseSpec.from_matrix(m)
    if not out.is_positive_definite:
        raise ValueError("adjusted noise covariance is not positive definite")
    return out


def prior_log_density(latent: LatentState, prior: PriorSpec, bases: Sequence[CirculantBase]) -> float:
    """Sum of the three unnormalised prior quadratic forms."""
    fields = (latent.x_g, latent.x_o, latent.x_clay)
    return float(sum(log_density_quadform(b, m, x) for b, m, x in zip(bases, prior.means, fields)))


def prior_log_constant(bases: Sequence[CirculantBase]) -> float:
    return float(sum(log_density_constant(b) for b in bases))


def sample_prior(prior: PriorSpec, bases: Sequence[CirculantBase], rng: np.random.Generator) -> LatentState:
    n = prior.grid.size
    draws = [sample_field(b, m, rng.standard_normal(n)) for b, m in zip(bases, prior.means)]
    return LatentState(*draws)


# --------------------------------------------------------------------------
# synthetic problem


@dataclass(frozen=True)
class DepthConfig:
    d_min: float = 2000.0
    d_max: float = 2250.0
    perturbation: float = 0.0

    def build(self, grid: GridSpec) -> DepthField:
        ti = np.arange(grid.nx) / max(grid.nx - 1, 1)
        tj = np.arange(grid.ny) / max(grid.ny - 1, 1)
        t = 0.5 * (ti[:, None] + tj[None, :])
        if self.perturbation:
            t = t + self.perturbation * np.sin(2 * np.pi * ti)[:, None] * np.sin(2 * np.pi * tj)[None, :]
        t = np.clip(t, 0.0, 1.0)
        return DepthField((self.d_min + (self.d_max - self.d_min) * t).ravel(), self.d_min, self.d_max)


@dataclass(frozen=True)
class PriorConfig:
    sigma: tuple[float, float, float] = (1.0, 1.0, 1.0)
    effective_range: tuple[float, float, float] = (3.0, 3.0, 3.0)
    trends: dict = field(default_factory=lambda: dict(DEFAULT_TRENDS))

    def correlations(self) -> tuple[CorrelationSpec, ...]:
        return tuple(CorrelationSpec(s, r) for s, r in zip(self.sigma, self.effective_range))

    def means(self, depth_norm) -> np.ndarray:
        return np.stack([self.trends[name](depth_norm) for name in FIELD_NAMES])

    def build(self, grid: GridSpec, depth: DepthField) -> PriorSpec:
        mu = self.means(depth.normalized())
        return PriorSpec(grid, mu[0], mu[1], mu[2], *self.correlations())


@dataclass(frozen=True, eq=False)
class SyntheticProblem:
    prior: PriorSpec
    depth: DepthField
    truth: LatentState
    data: AVOObservation


def draw_noise(noise: NoiseSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, 2)`` draws of correlated (R0, G) noise; degenerate variances give zeros."""
    z = rng.standard_normal((n, 2))
    sr, sg = math.sqrt(noise.var_r0), math.sqrt(noise.var_g)
    rho = noise.corr
    e_r0 = sr * z[:, 0]
    e_g = sg * (rho * z[:, 0] + math.sqrt(max(1 - rho * rho, 0.0)) * z[:, 1])
    return np.column_stack([e_r0, e_g])


def make_synthetic_problem(grid: GridSpec, depth_cfg: DepthConfig, prior_cfg: PriorConfig,
                           noise: NoiseSpec, rng: np.random.Generator,
                           forward: ForwardModel | None = None) -> SyntheticProblem:
    """Depth ramp, prior, a truth drawn from the prior and noisy synthetic AVO data."""
    forward = forward if forward is not None else SyntheticForward()
    depth = depth_cfg.build(grid)
    prior = prior_cfg.build(grid, depth)
    truth = sample_prior(prior, prior.build_bases(), rng)
    clean = forward(covariates(truth, depth.normalized()))
    e = draw_noise(noise, grid.size, rng)
    data = AVOObservation(clean[:, 0] + e[:, 0], clean[:, 1] + e[:, 1])
    return SyntheticProblem(prior, depth, truth, data)


def sample_training_set(n: int, prior_cfg: PriorConfig, forward: ForwardModel,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Covariates with depth uniform on [0, 1] and latents from the depth-conditional prior marginal.

    Returns ``X`` of shape ``(n, 4)`` and noise-free responses ``Y`` of shape ``(n, 2)``.
    """
    d = rng.uniform(0.0, 1.0, size=n)
    mu = prior_cfg.means(d)
    sig = np.asarray(prior_cfg.sigma, dtype=float)[:, None]
    lat = mu + sig * rng.standard_normal((3, n))
    X = np.column_stack([lat[0], lat[1], lat[2], d])
    return X, forward(X)
