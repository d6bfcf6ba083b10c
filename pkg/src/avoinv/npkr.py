"""Nadaraya-Watson kernel regression with product Gaussian kernels.

Bandwidths are the per-covariate kernel standard deviations and are chosen by
least-squares leave-one-out cross-validation.  All kernel sums are done in log
space with the row maximum subtracted, so distant queries still get a proper
weight vector instead of ``0/0``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "NpkrModel",
    "BandwidthFit",
    "NadarayaWatsonRegressor",
    "rule_of_thumb",
    "loo_score",
    "fit_bandwidths_lscv",
    "save_npkr",
    "load_npkr",
]

_MAGIC = b"NPKR"
_VERSION = 1
_HEADER = struct.Struct("<4sBII")
_CHUNK = 2048


def _log_kernel(Q: np.ndarray, X: np.ndarray, bw: np.ndarray) -> np.ndarray:
    """``log K`` up to a constant for every (query, training) pair."""
    d2 = np.zeros((Q.shape[0], X.shape[0]))
    for k in range(X.shape[1]):
        diff = (Q[:, k, None] - X[None, :, k]) / bw[k]
        d2 += diff * diff
    return -0.5 * d2


def _normalise(logk: np.ndarray) -> np.ndarray:
    logk = logk - logk.max(axis=1, keepdims=True)
    w = np.exp(logk)
    return w / w.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class NpkrModel:
    X: np.ndarray
    y: np.ndarray
    bandwidths: np.ndarray
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.array(self.X, dtype=float, ndmin=2)
        y = np.array(self.y, dtype=float).ravel()
        bw = np.array(self.bandwidths, dtype=float).ravel()
        if X.shape[0] < 1 or X.shape[0] != y.size:
            raise ValueError("X and y must have the same, positive, number of rows")
        if bw.size != X.shape[1]:
            raise ValueError(f"need {X.shape[1]} bandwidths, got {bw.size}")
        if not np.all(bw > 0) or not np.all(np.isfinite(bw)):
            raise ValueError("bandwidths must be positive and finite")
        for a in (X, y, bw):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def weights(self, x) -> np.ndarray:
        """Normalised kernel weights of one query over the training points."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return _normalise(_log_kernel(x, self.X, self.bandwidths))[0]

    def predict(self, Q) -> np.ndarray | float:
        Q = np.asarray(Q, dtype=float)
        single = Q.ndim == 1
        Q2 = Q.reshape(1, -1) if single else Q
        if Q2.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {Q2.shape[1]}")
        out = np.empty(Q2.shape[0])
        for s in range(0, Q2.shape[0], _CHUNK):
            block = Q2[s:s + _CHUNK]
            w = _normalise(_log_kernel(block, self.X, self.bandwidths))
            out[s:s + _CHUNK] = w @ self.y
        return float(out[0]) if single else out


def rule_of_thumb(X: np.ndarray) -> np.ndarray:
    """``1.06 sigma_j n^(-1/5)``; zero-variance columns use ``sigma_j = 1``."""
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(X.shape[1])
    sd = np.where(sd > 0, sd, 1.0)
    return 1.06 * sd * X.shape[0] ** (-0.2)


def loo_score(X, y, bandwidths) -> float:
    """Exact ``sum_i (y_i - h_{-i}(x_i))^2``; ``O(n^2)`` work in row blocks."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    bw = np.asarray(bandwidths, dtype=float)
    n = X.shape[0]
    total = 0.0
    for s in range(0, n, _CHUNK):
        idx = np.arange(s, min(s + _CHUNK, n))
        logk = _log_kernel(X[idx], X, bw)
        logk[np.arange(idx.size), idx] = -np.inf
        w = _normalise(logk)
        e = y[idx] - w @ y
        total += float(e @ e)
    return total


@dataclass(frozen=True)
class BandwidthFit:
    bandwidths: np.ndarray
    score: float
    n_evals: int
    start_scores: tuple[float, ...]
    flags: tuple[str, ...]


def fit_bandwidths_lscv(X, y, n_starts: int = 5, max_evals: int = 200, seed: int = 0,
                        init_step: float = 1.0, min_step: float = 1e-3) -> BandwidthFit:
    """Minimise the leave-one-out squared error over log bandwidths.

    Coordinate descent from ``n_starts`` points (the rule of thumb plus seeded
    random rescalings of it) sharing one budget of ``max_evals`` objective
    evaluations.  Zero-variance covariates keep the rule-of-thumb bandwidth
    and are flagged; so does a constant response, for which every bandwidth
    gives zero error.
    """
    X, y = check_X_y(X, y, y_numeric=True)
    n, p = X.shape
    if n < 3:
        raise ValueError("LSCV needs at least three observations")
    base = rule_of_thumb(X)
    free = np.flatnonzero(np.ptp(X, axis=0) > 0)
    flags = [f"degenerate_covariate_{j}" for j in range(p) if j not in set(free.tolist())]
    if np.ptp(y) == 0 or free.size == 0:
        flags.append("constant_response" if np.ptp(y) == 0 else "no_free_covariates")
        return BandwidthFit(base, loo_score(X, y, base), 1, (), tuple(flags))

    rng = np.random.default_rng(seed)
    starts = [np.log(base)]
    for _ in range(n_starts - 1):
        s = np.log(base).copy()
        s[free] += rng.uniform(-1.5, 1.5, size=free.size)
        starts.append(s)

    evals = 0
    best_val, best_lb = np.inf, None

    def objective(lb):
        nonlocal evals, best_val, best_lb
        evals += 1
        v = loo_score(X, y, np.exp(lb))
        if v < best_val:
            best_val, best_lb = v, lb.copy()
        return v

    start_scores = []
    per_start = max(max_evals // max(n_starts, 1), 1)
    for k, lb0 in enumerate(starts):
        if evals >= max_evals:
            break
        budget = min(evals + per_start if k < len(starts) - 1 else max_evals, max_evals)
        lb = lb0.copy()
        val = objective(lb)
        start_scores.append(val)
        step = init_step
        while evals < budget and step >= min_step:
            improved = False
            for j in free:
                for sign in (1.0, -1.0):
                    if evals >= budget:
                        break
                    trial = lb.copy()
                    trial[j] += sign * step
                    tv = objective(trial)
                    if tv < val:
                        lb, val, improved = trial, tv, True
                        break
            if not improved:
                step *= 0.5
    return BandwidthFit(np.exp(best_lb), best_val, evals, tuple(start_scores), tuple(flags))


class NadarayaWatsonRegressor(RegressorMixin, BaseEstimator):
    """Kernel-weighted average regressor.

    ``bandwidths=None`` selects them by LSCV.  ``n_subset`` trains on a seeded
    uniform random subset of that many rows, which keeps the ``O(n^2)``
    cross-validation affordable.
    """

    def __init__(self, bandwidths=None, n_subset=None, n_starts=5, max_evals=200, random_state=0):
        self.bandwidths = bandwidths
        self.n_subset = n_subset
        self.n_starts = n_starts
        self.max_evals = max_evals
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        if self.n_subset is not None and X.shape[0] > self.n_subset:
            rng = np.random.default_rng(self.random_state)
            idx = np.sort(rng.choice(X.shape[0], size=self.n_subset, replace=False))
            X, y = X[idx], y[idx]
        if self.bandwidths is None:
            self.bandwidth_fit_ = fit_bandwidths_lscv(X, y, self.n_starts, self.max_evals, self.random_state)
            bw, flags = self.bandwidth_fit_.bandwidths, self.bandwidth_fit_.flags
        else:
            self.bandwidth_fit_ = None
            bw, flags = np.broadcast_to(np.asarray(self.bandwidths, dtype=float), (X.shape[1],)), ()
        self.model_ = NpkrModel(X, y, bw, flags)
        return self

    @classmethod
    def from_model(cls, model: NpkrModel) -> "NadarayaWatsonRegressor":
        est = cls(bandwidths=model.bandwidths)
        est.n_features_in_ = model.n_features
        est.bandwidth_fit_ = None
        est.model_ = model
        return est

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.predict(X)


def save_npkr(model: NpkrModel, path) -> None:
    """``NPKR`` binary: magic, version, n, p (u32 LE), bandwidths, X row-major, y (f64 LE)."""
    n, p = model.X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, n, p))
        for a in (model.bandwidths, model.X, model.y):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_npkr(path) -> NpkrModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated NPKR file")
    magic, version, n, p = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported NPKR version {version}")
    expected = _HEADER.size + 8 * (p + n * p + n)
    if len(raw) != expected:
        raise ValueError(f"NPKR payload has {len(raw)} bytes, expected {expected}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    bw, X, y = vals[:p], vals[p:p + n * p].reshape(n, p), vals[p + n * p:]
    return NpkrModel(X, y, bw)
