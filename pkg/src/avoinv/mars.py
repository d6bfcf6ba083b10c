"""Multivariate adaptive regression splines, written from scratch.

Model form: ``h(x) = b0 + sum_d b_d * prod_k hinge_k(x)`` where each hinge is
``(x_j - c)_+`` or ``(c - x_j)_+`` with ``c`` an observed training value.

Forward pass
    Greedy.  For a parent term ``g`` and a covariate ``j`` the reflected pair
    ``{g (x_j - c)_+, g (c - x_j)_+}`` spans the same space (given that ``g`` is
    already in the model) as ``{g x_j, g (x_j - c)_+}``.  So the pair's RSS
    reduction splits into a knot-free linear part plus a single hinge column,
    and the hinge part for *every* candidate knot is obtained from suffix sums
    over the covariate sorted on the parent's support.  Coefficients are exact
    least-squares solutions (minimum norm when the basis is rank deficient).

Backward pass
    Terms are deleted one at a time (smallest RSS increase, refit each time),
    and the size minimising GCV is returned.  Refits use the triangular factor
    of one QR decomposition of the full basis, so each candidate costs a
    ``M x M`` solve instead of an ``n x M`` one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "HingeFactor",
    "MarsTerm",
    "MarsModel",
    "MarsFitConfig",
    "MARSRegressor",
    "GradientSurrogate",
    "basis_matrix",
    "gcv",
    "fit_forward",
    "prune_backward",
    "fit_gradient_models",
]

_FORMAT = "avoinv-mars"
_VERSION = 1


@dataclass(frozen=True)
class HingeFactor:
    """``(x[var] - knot)_+`` for ``direction=+1``, ``(knot - x[var])_+`` for ``-1``."""

    var: int
    knot: float
    direction: int

    def __post_init__(self):
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")

    def __call__(self, X: np.ndarray) -> np.ndarray:
        x = X[:, self.var]
        return np.maximum(x - self.knot, 0.0) if self.direction > 0 else np.maximum(self.knot - x, 0.0)

    def derivative(self, X: np.ndarray) -> np.ndarray:
        # at the knot itself both sides use derivative 0
        x = X[:, self.var]
        if self.direction > 0:
            return (x > self.knot).astype(float)
        return -(x < self.knot).astype(float)

    def label(self) -> str:
        if self.direction > 0:
            return f"(x{self.var} - {self.knot:.6g})+"
        return f"({self.knot:.6g} - x{self.var})+"


@dataclass(frozen=True)
class MarsTerm:
    coefficient: float
    factors: tuple[HingeFactor, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        used = [f.var for f in self.factors]
        if len(used) != len(set(used)):
            raise ValueError("a term may use each covariate at most once")

    @property
    def degree(self) -> int:
        return len(self.factors)


def basis_matrix(factor_sets: Sequence[Sequence[HingeFactor]], X: np.ndarray) -> np.ndarray:
    """Evaluate the basis functions (one per factor set) on the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    cache: dict[HingeFactor, np.ndarray] = {}
    B = np.empty((X.shape[0], len(factor_sets)))
    for k, factors in enumerate(factor_sets):
        col = np.ones(X.shape[0])
        for f in factors:
            h = cache.get(f)
            if h is None:
                h = cache[f] = f(X)
            col = col * h
        B[:, k] = col
    return B


def gcv(rss: float, n: int, n_terms: int, penalty: float = 3.0) -> float:
    """Generalised cross-validation ``(rss/n) / (1 - C/n)^2``.

    ``C = n_terms + penalty * (n_terms - 1) / 2``; the knots are counted as
    ``(n_terms - 1) / 2`` because terms enter in reflected pairs.
    """
    c = n_terms + penalty * (n_terms - 1) / 2.0
    if c >= n:
        raise ValueError(f"effective parameter count {c:g} must be below n={n}")
    return (rss / n) / (1.0 - c / n) ** 2


@dataclass(frozen=True, eq=False)
class MarsModel:
    terms: tuple[MarsTerm, ...]
    n_features: int
    gcv: float
    rss: float
    n_train: int
    penalty: float = 3.0
    trace: tuple = field(default=(), repr=False)

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def n_interactions(self) -> int:
        return sum(1 for t in self.terms if t.degree >= 2)

    @property
    def intercept(self) -> float:
        return self.terms[0].coefficient

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([t.coefficient for t in self.terms])

    def basis(self, X) -> np.ndarray:
        return basis_matrix([t.factors for t in self.terms], X)

    def predict(self, X) -> np.ndarray | float:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        if X2.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X2.shape[1]}")
        # contiguous per-covariate rows make the hinge evaluations cheap
        XT = np.ascontiguousarray(X2.T)
        out = np.full(X2.shape[0], self.terms[0].coefficient if self.terms else 0.0)
        cache: dict[HingeFactor, np.ndarray] = {}
        for term in self.terms:
            if not term.factors:
                continue
            col = None
            for f in term.factors:
                h = cache.get(f)
                if h is None:
                    x = XT[f.var]
                    h = x - f.knot if f.direction > 0 else f.knot - x
                    np.maximum(h, 0.0, out=h)
                    cache[f] = h
                col = h.copy() if col is None else np.multiply(col, h, out=col)
            col *= term.coefficient
            out += col
        return float(out[0]) if single else out

    def predict_gradient(self, X) -> np.ndarray:
        """Exact derivative of the piecewise-linear model, shape ``(n, p)`` (or ``(p,)``)."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        grad = np.zeros((X2.shape[0], self.n_features))
        cache: dict[HingeFactor, tuple[np.ndarray, np.ndarray]] = {}
        for term in self.terms:
            if not term.factors:
                continue
            vals, ders = [], []
            for f in term.factors:
                if f not in cache:
                    cache[f] = (f(X2), f.derivative(X2))
                v, d = cache[f]
                vals.append(v)
                ders.append(d)
            for a, f in enumerate(term.factors):
                prod = ders[a]
                for b, v in enumerate(vals):
                    if b != a:
                        prod = prod * v
                grad[:, f.var] += term.coefficient * prod
        return grad[0] if single else grad

    def describe(self) -> str:
        lines = [f"intercept {self.intercept:.6g}"]
        for t in self.terms[1:]:
            lines.append(f"{t.coefficient:+.6g} * " + " * ".join(f.label() for f in t.factors))
        return "\n".join(lines)

    # text serialisation; json writes floats with repr so the round trip is exact
    def to_dict(self) -> dict:
        return {
            "format": _FORMAT,
            "version": _VERSION,
            "n_features": self.n_features,
            "n_train": self.n_train,
            "gcv": self.gcv,
            "rss": self.rss,
            "penalty": self.penalty,
            "terms": [
                {
                    "coefficient": t.coefficient,
                    "factors": [[f.var, f.knot, "+" if f.direction > 0 else "-"] for f in t.factors],
                }
                for t in self.terms
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MarsModel":
        if d.get("format") != _FORMAT:
            raise ValueError("not a MARS model document")
        if d.get("version") != _VERSION:
            raise ValueError(f"unsupported MARS model version {d.get('version')}")
        terms = tuple(
            MarsTerm(
                float(t["coefficient"]),
                tuple(HingeFactor(int(v), float(k), 1 if s == "+" else -1) for v, k, s in t["factors"]),
            )
            for t in d["terms"]
        )
        return cls(terms, int(d["n_features"]), float(d["gcv"]), float(d["rss"]),
                   int(d["n_train"]), float(d.get("penalty", 3.0)))

    @classmethod
    def from_json(cls, text: str) -> "MarsModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "MarsModel":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class MarsFitConfig:
    """Forward-pass knobs.

    ``max_knots`` thins the candidate knots of each (parent, covariate) pair to
    that many quantiles; ``min_span`` keeps every ``min_span``-th distinct
    value and ``end_span`` drops that many distinct values at each end.  All
    default to the exhaustive search.
    """

    max_terms: int = 41
    max_degree: int = 2
    penalty: float = 3.0
    max_knots: int | None = None
    min_span: int = 0
    end_span: int = 0
    tol: float = 1e-10

    def __post_init__(self):
        if self.max_terms < 1:
            raise ValueError("max_terms must be >= 1")
        if self.max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        if self.max_knots is not None and self.max_knots < 1:
            raise ValueError("max_knots must be positive")


def _lstsq(B: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    beta = np.linalg.lstsq(B, y, rcond=None)[0]
    resid = y - B @ beta
    return beta, float(resid @ resid)


def _safe_gcv(rss: float, n: int, n_terms: int, penalty: float) -> float:
    try:
        return gcv(rss, n, n_terms, penalty)
    except ValueError:
        return float("inf")


def _candidate_knots(xs_sorted: np.ndarray, cfg: MarsFitConfig) -> np.ndarray:
    u = np.unique(xs_sorted)[:-1]  # a knot at the maximum gives a vanishing hinge
    if cfg.end_span:
        u = u[cfg.end_span:len(u) - cfg.end_span] if len(u) > 2 * cfg.end_span else u[:0]
    if cfg.min_span > 1:
        u = u[::cfg.min_span]
    if cfg.max_knots is not None and len(u) > cfg.max_knots:
        idx = np.unique(np.round(np.linspace(0, len(u) - 1, cfg.max_knots)).astype(int))
        u = u[idx]
    return u


@dataclass
class _Candidate:
    reduction: float
    parent: int
    var: int
    knot: float
    linear_only: bool


def _score_pair(g_s, x_s, Q_s, r_s, r_full_dot_w, cfg) -> _Candidate | None:
    """Best knot for one (parent, covariate) pair, restricted to the parent's support."""
    w = g_s * x_s
    ww = float(w @ w)
    if ww == 0.0:
        return None
    c1 = Q_s.T @ w
    denom = ww - float(c1 @ c1)
    red_lin = 0.0
    if denom > 1e-10 * ww:
        q_norm = np.sqrt(denom)
        q_s = (w - Q_s @ c1) / q_norm
        rq = r_full_dot_w / q_norm
        red_lin = rq * rq
        r_s = r_s - rq * q_s
        Q_s = np.column_stack([Q_s, q_s])

    order = np.argsort(x_s, kind="stable")
    xs = x_s[order]
    knots = _candidate_knots(xs, cfg)
    if knots.size == 0:
        return _Candidate(red_lin, -1, -1, float(xs[0]), True) if red_lin > 0 else None

    # shift to reduce cancellation in the expanded squares; (x - c) is shift invariant
    ref = float(np.median(xs))
    xc = xs - ref
    kc = knots - ref
    gs = g_s[order]
    A = Q_s[order] * gs[:, None]
    rg = r_s[order] * gs
    g2 = gs * gs
    m = A.shape[1]
    cols = np.column_stack([A * xc[:, None], A, rg * xc, rg, g2 * xc * xc, g2 * xc, g2])
    suffix = np.empty((cols.shape[0] + 1, cols.shape[1]))
    suffix[-1] = 0.0
    np.cumsum(cols[::-1], axis=0, out=suffix[-2::-1])
    S = suffix[np.searchsorted(xs, knots, side="right")]
    k = kc[:, None]
    qv = S[:, :m] - k * S[:, m:2 * m]
    rv = S[:, 2 * m] - kc * S[:, 2 * m + 1]
    vv = S[:, 2 * m + 2] - 2 * kc * S[:, 2 * m + 3] + kc * kc * S[:, 2 * m + 4]
    vperp = vv - np.einsum("ij,ij->i", qv, qv)
    ok = (vv > 0) & (vperp > 1e-10 * vv)
    red = np.zeros_like(vv)
    red[ok] = rv[ok] ** 2 / vperp[ok]
    best = int(np.argmax(red))
    if red[best] <= 0.0:
        if red_lin <= 0.0:
            return None
        return _Candidate(red_lin, -1, -1, float(xs[0]), True)
    return _Candidate(red_lin + float(red[best]), -1, -1, float(knots[best]), False)


def _orthonormal_append(Q: np.ndarray, col: np.ndarray) -> np.ndarray:
    norm0 = np.linalg.norm(col)
    if norm0 == 0.0:
        return Q
    u = col - Q @ (Q.T @ col)
    u = u - Q @ (Q.T @ u)
    nu = np.linalg.norm(u)
    if nu <= 1e-10 * norm0:
        return Q
    return np.column_stack([Q, u / nu])


def fit_forward(X, y, cfg: MarsFitConfig = MarsFitConfig()) -> MarsModel:
    """Greedy forward construction of hinge-pair terms up to ``cfg.max_terms``."""
    X, y = check_X_y(X, y, y_numeric=True)
    y = y.astype(float)
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two observations")
    factor_sets: list[tuple[HingeFactor, ...]] = [()]
    cols: list[np.ndarray] = [np.ones(n)]
    Q = (np.ones(n) / np.sqrt(n))[:, None]
    r = y - Q[:, 0] * (Q[:, 0] @ y)
    rss = float(r @ r)
    # below this the residual is rounding noise of the response itself
    floor = max(1e-24 * rss, 1e-26 * float(y @ y))
    trace = [(1, rss)]

    while len(factor_sets) < cfg.max_terms and rss > floor:
        best: _Candidate | None = None
        for pi, parent in enumerate(factor_sets):
            if len(parent) >= cfg.max_degree:
                continue
            g = cols[pi]
            support = np.flatnonzero(g)
            if support.size < 2:
                continue
            used = {f.var for f in parent}
            g_s, Q_s, r_s = g[support], Q[support], r[support]
            for j in range(p):
                if j in used:
                    continue
                x_s = X[support, j]
                cand = _score_pair(g_s, x_s, Q_s, r_s, float(r_s @ (g_s * x_s)), cfg)
                if cand is None:
                    continue
                if best is None or cand.reduction > best.reduction:
                    cand.parent, cand.var = pi, j
                    best = cand
        if best is None or best.reduction <= cfg.tol * rss:
            break
        parent = factor_sets[best.parent]
        plus = parent + (HingeFactor(best.var, best.knot, 1),)
        new_terms = [plus] if best.linear_only else [plus, parent + (HingeFactor(best.var, best.knot, -1),)]
        if len(factor_sets) + len(new_terms) > cfg.max_terms:
            break
        g = cols[best.parent]
        for fs in new_terms:
            col = g * fs[-1](X)
            factor_sets.append(tuple(sorted(fs, key=lambda f: f.var)))
            cols.append(col)
            Q = _orthonormal_append(Q, col)
        r = y - Q @ (Q.T @ y)
        rss = float(r @ r)
        trace.append((len(factor_sets), rss))

    B = np.column_stack(cols)
    beta, rss = _lstsq(B, y)
    terms = tuple(MarsTerm(float(b), fs) for b, fs in zip(beta, factor_sets))
    return MarsModel(terms, p, _safe_gcv(rss, n, len(terms), cfg.penalty), rss, n, cfg.penalty, tuple(trace))


def prune_backward(model: MarsModel, X, y) -> MarsModel:
    """Backward deletion followed by GCV model selection (ties favour fewer terms)."""
    X, y = check_X_y(X, y, y_numeric=True)
    y = y.astype(float)
    n = X.shape[0]
    if model.n_terms <= 1:
        return model
    factor_sets = [t.factors for t in model.terms]
    B = basis_matrix(factor_sets, X)
    Q, R = np.linalg.qr(B)
    qty = Q.T @ y
    resid0 = y - Q @ qty
    base_rss = float(resid0 @ resid0)

    def subset_rss(cols: list[int]) -> float:
        Rs = R[:, cols]
        beta = np.linalg.lstsq(Rs, qty, rcond=None)[0]
        e = qty - Rs @ beta
        return base_rss + float(e @ e)

    active = list(range(len(factor_sets)))
    path = [(list(active), subset_rss(active))]
    while len(active) > 1:
        best_k, best_rss = None, np.inf
        for k in active[1:]:
            rss_k = subset_rss([c for c in active if c != k])
            if rss_k < best_rss:
                best_k, best_rss = k, rss_k
        active.remove(best_k)
        path.append((list(active), best_rss))

    scored = [(len(cols), rss, _safe_gcv(rss, n, len(cols), model.penalty), cols) for cols, rss in path]
    chosen = None
    for item in sorted(scored, key=lambda s: s[0]):
        if chosen is None or item[2] < chosen[2]:
            chosen = item
    cols = chosen[3]
    beta, rss = _lstsq(B[:, cols], y)
    terms = tuple(MarsTerm(float(b), factor_sets[c]) for b, c in zip(beta, cols))
    trace = tuple((s[0], s[1], s[2]) for s in scored)
    return MarsModel(terms, model.n_features, _safe_gcv(rss, n, len(terms), model.penalty), rss, n,
                     model.penalty, trace)


class MARSRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn style MARS estimator.

    Parameters
    ----------
    max_terms : int
        Size of the forward model (intercept included) before pruning.
    max_degree : int
        Maximum number of hinge factors per term.
    penalty : float
        GCV cost per knot.
    max_knots, min_span, end_span : int
        Optional knot thinning, see :class:`MarsFitConfig`.
    prune : bool
        Run the backward pass; otherwise the forward model is kept.
    """

    def __init__(self, max_terms=41, max_degree=2, penalty=3.0, max_knots=None,
                 min_span=0, end_span=0, prune=True):
        self.max_terms = max_terms
        self.max_degree = max_degree
        self.penalty = penalty
        self.max_knots = max_knots
        self.min_span = min_span
        self.end_span = end_span
        self.prune = prune

    def _config(self) -> MarsFitConfig:
        return MarsFitConfig(self.max_terms, self.max_degree, self.penalty, self.max_knots,
                             self.min_span, self.end_span)

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.forward_model_ = fit_forward(X, y, self._config())
        self.model_ = prune_backward(self.forward_model_, X, y) if self.prune else self.forward_model_
        return self

    @classmethod
    def from_model(cls, model: MarsModel) -> "MARSRegressor":
        est = cls(penalty=model.penalty)
        est.n_features_in_ = model.n_features
        est.forward_model_ = model
        est.model_ = model
        return est

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        X = self._check(X)
        return self.model_.predict(X)

    def predict_gradient(self, X):
        X = self._check(X)
        return self.model_.predict_gradient(X)


class GradientSurrogate:
    """Six MARS models of the forward-model partial derivatives (the MARS_grad bundle).

    ``predict`` returns ``(n, 2, 3)``: response (R0, G) by latent (x_g, x_o, x_clay).
    """

    responses = ("R0", "G")
    latents = ("x_g", "x_o", "x_clay")

    def __init__(self, models: dict):
        self.models = models

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.empty((X.shape[0], 2, 3))
        for a, resp in enumerate(self.responses):
            for b, lat in enumerate(self.latents):
                out[:, a, b] = self.models[resp, lat].predict(X)
        return out

    __call__ = predict

    def to_dict(self) -> dict:
        return {f"{r}/{l}": m.model_.to_dict() for (r, l), m in self.models.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GradientSurrogate":
        models = {}
        for key, doc in d.items():
            r, l = key.split("/")
            models[r, l] = MARSRegressor.from_model(MarsModel.from_dict(doc))
        return cls(models)


def fit_gradient_models(forward: Callable[[np.ndarray], np.ndarray], X, eps: float = 1e-4,
                        estimator: MARSRegressor | None = None) -> GradientSurrogate:
    """Fit MARS to one-sided finite-difference derivatives of ``forward``.

    ``forward`` maps covariate rows ``(x_g, x_o, x_clay, depth)`` to ``(R0, G)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    X = check_array(X)
    base = np.asarray(forward(X))
    template = estimator if estimator is not None else MARSRegressor()
    models = {}
    for j, lat in enumerate(GradientSurrogate.latents):
        Xp = X.copy()
        Xp[:, j] += eps
        fd = (np.asarray(forward(Xp)) - base) / eps
        for a, resp in enumerate(GradientSurrogate.responses):
            est = MARSRegressor(**template.get_params())
            models[resp, lat] = est.fit(X, fd[:, a])
    return GradientSurrogate(models)
