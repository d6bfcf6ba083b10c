"""Metropolis-Hastings over the three latent fields.

Four proposal kernels are available: an isotropic random walk, a random walk
with prior-shaped increments, preconditioned Crank-Nicolson and MALA.  The
chain state is a ``(3, N)`` array ordered x_g, x_o, x_clay.  All three prior
fields are filtered together with one batched 2D FFT per operation.
"""
from __future__ import annotations

import csv
import enum
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .grf_fft import CirculantBase, GridSpec, _filter
from .model import (
    AVOObservation,
    LatentState,
    NoiseSpec,
    PriorSpec,
    to_reservoir,
)

__all__ = [
    "ProposalKind",
    "ProposalSpec",
    "PRIOR_REVERSIBLE",
    "DEFAULT_TARGETS",
    "Posterior",
    "ChainState",
    "Proposal",
    "ChainConfig",
    "ChainOutput",
    "TuneResult",
    "SurrogateJacobian",
    "FiniteDifferenceJacobian",
    "propose",
    "acceptance_log_ratio",
    "step",
    "run_chain",
    "tune_step_size",
    "compare_proposals",
    "save_chain",
    "load_chain",
]


class ProposalKind(str, enum.Enum):
    RW_IDENTITY = "rw_identity"
    RW_PRIOR = "rw_prior"
    PCN = "pcn"
    MALA = "mala"

    @classmethod
    def parse(cls, text: str) -> "ProposalKind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("-", "_")
        aliases = {"rwidentity": "rw_identity", "rwprior": "rw_prior", "q1": "rw_identity",
                   "q2": "rw_prior", "q3": "pcn", "q4": "mala"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown proposal {text!r}; expected one of {[k.value for k in cls]}") from None


DEFAULT_TARGETS = {
    ProposalKind.RW_IDENTITY: 0.234,
    ProposalKind.RW_PRIOR: 0.234,
    ProposalKind.PCN: 0.234,
    ProposalKind.MALA: 0.574,
}


@dataclass(frozen=True)
class ProposalSpec:
    kind: ProposalKind
    s: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ProposalKind(self.kind))
        if not self.s > 0 or not math.isfinite(self.s):
            raise ValueError("step size must be positive")
        if self.kind is ProposalKind.PCN and self.s > 1:
            raise ValueError("pCN step size must lie in (0, 1]")


class _PriorReversible:
    """Marker standing in for proposal densities that cancel against the prior."""

    def __repr__(self):
        return "PRIOR_REVERSIBLE"


PRIOR_REVERSIBLE = _PriorReversible()

# (N, 4) covariates -> (N, 2, 3) derivatives of (R0, G) w.r.t. (x_g, x_o, x_clay)
Jacobian = Callable[[np.ndarray], np.ndarray]


class SurrogateJacobian:
    """Analytic Jacobian of a surrogate whose two regressors expose ``predict_gradient``."""

    def __init__(self, surrogate):
        self.surrogate = surrogate

    def __call__(self, X):
        J = np.empty((X.shape[0], 2, 3))
        J[:, 0] = self.surrogate.r0_model.predict_gradient(X)[:, :3]
        J[:, 1] = self.surrogate.g_model.predict_gradient(X)[:, :3]
        return J


class FiniteDifferenceJacobian:
    """Central differences of any forward model."""

    def __init__(self, forward, eps: float = 1e-6):
        self.forward = forward
        self.eps = eps

    def __call__(self, X):
        J = np.empty((X.shape[0], 2, 3))
        for k in range(3):
            Xp, Xm = X.copy(), X.copy()
            Xp[:, k] += self.eps
            Xm[:, k] -= self.eps
            J[:, :, k] = (self.forward(Xp) - self.forward(Xm)) / (2 * self.eps)
        return J


@dataclass(frozen=True, eq=False)
class ChainState:
    x: np.ndarray
    log_lik: float
    log_prior: float | None = None  # prior quadratic form; None when the kernel never needs it
    grad: np.ndarray | None = None  # gradient of the log posterior, MALA only

    @property
    def latent(self) -> LatentState:
        return LatentState.from_array(self.x)


class Posterior:
    """Prior, data, noise and forward model bundled for the sampler.

    ``data=None`` gives a flat likelihood (``log_lik = 0``), i.e. pure prior
    sampling.  ``jacobian`` supplies ``dh/dx`` for MALA.
    """

    def __init__(self, prior: PriorSpec, bases, depth_norm, data: AVOObservation | None = None,
                 noise: NoiseSpec | None = None, forward=None, jacobian: Jacobian | None = None):
        self.prior = prior
        self.bases = tuple(bases)
        if len(self.bases) != 3:
            raise ValueError("need one circulant base per latent field")
        self.grid: GridSpec = prior.grid
        for b in self.bases:
            if b.grid != self.grid:
                raise ValueError("circulant bases and prior live on different grids")
            if b.is_singular:
                raise ValueError("prior covariance is singular; the posterior density is undefined")
        self.n = self.grid.size
        self.depth_norm = np.asarray(depth_norm, dtype=float).ravel()
        if self.depth_norm.size != self.n:
            raise ValueError("depth field and prior grid differ")
        self.mu = np.asarray(prior.means, dtype=float).reshape(3, self.n)
        shape = (3,) + self.grid.shape
        self._eig = np.stack([b.eigen_sqrt for b in self.bases]).reshape(shape)
        self._inv = np.stack([b.inv_eigen_sqrt for b in self.bases]).reshape(shape)
        self._inv2 = self._inv**2
        self.data = data
        self.noise = noise
        self.forward = forward
        self.jacobian = jacobian
        if data is not None:
            if noise is None or forward is None:
                raise ValueError("a likelihood needs noise and a forward model")
            noise.check_positive_definite()
            if data.R0.size != self.n:
                raise ValueError("data and prior grid differ")
            self._y = np.column_stack([data.R0, data.G])
            self._prec = np.linalg.inv(noise.matrix)
            self._const = -self.n * math.log(2 * math.pi) - 0.5 * self.n * math.log(noise.det)

    @property
    def flat(self) -> bool:
        return self.data is None

    def with_noise(self, noise: NoiseSpec) -> "Posterior":
        return Posterior(self.prior, self.bases, self.depth_norm, self.data, noise, self.forward, self.jacobian)

    def _grid3(self, v: np.ndarray) -> np.ndarray:
        return v.reshape((3,) + self.grid.shape)

    def covariates(self, x: np.ndarray) -> np.ndarray:
        return np.column_stack([x[0], x[1], x[2], self.depth_norm])

    def _residuals(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = self.covariates(x)
        return self._y - np.asarray(self.forward(X)), X

    def log_likelihood(self, x) -> float:
        if self.flat:
            return 0.0
        e, _ = self._residuals(np.asarray(x).reshape(3, self.n))
        return self._loglik_from_residuals(e)

    def _loglik_from_residuals(self, e: np.ndarray) -> float:
        P = self._prec
        quad = P[0, 0] * e[:, 0] ** 2 + 2 * P[0, 1] * e[:, 0] * e[:, 1] + P[1, 1] * e[:, 1] ** 2
        return float(-0.5 * quad.sum() + self._const)

    def prior_quadform(self, x) -> float:
        v = self._grid3(np.asarray(x, dtype=float).reshape(3, self.n) - self.mu)
        u = _filter(self._inv, v)
        return -0.5 * float(np.sum(u * u))

    def prior_gradient(self, x) -> np.ndarray:
        v = self._grid3(np.asarray(x, dtype=float).reshape(3, self.n) - self.mu)
        return -_filter(self._inv2, v).reshape(3, self.n)

    def prior_noise(self, rng: np.random.Generator) -> np.ndarray:
        """Zero-mean draw with the prior covariance, shape ``(3, N)``."""
        z = rng.standard_normal((3,) + self.grid.shape)
        return _filter(self._eig, z).reshape(3, self.n)

    def sample_prior(self, rng: np.random.Generator) -> np.ndarray:
        return self.mu + self.prior_noise(rng)

    def grad_log_posterior(self, x) -> np.ndarray:
        return self.evaluate(x, need_prior=False, need_grad=True).grad

    def evaluate(self, x, need_prior: bool = True, need_grad: bool = False) -> ChainState:
        x = np.asarray(x, dtype=float).reshape(3, self.n)
        grad = None
        if self.flat:
            ll = 0.0
            if need_grad:
                grad = self.prior_gradient(x)
        else:
            e, X = self._residuals(x)
            ll = self._loglik_from_residuals(e)
            if need_grad:
                if self.jacobian is None:
                    raise ValueError("MALA needs a gradient provider")
                J = np.asarray(self.jacobian(X))
                pe = e @ self._prec  # Omega^{-1} e per cell (symmetric)
                grad = self.prior_gradient(x) + np.einsum("na,nak->kn", pe, J)
        lp = self.prior_quadform(x) if need_prior else None
        return ChainState(x, ll, lp, grad)


@dataclass(frozen=True, eq=False)
class Proposal:
    x: np.ndarray
    log_q_forward: object
    log_q_backward: object
    state: ChainState | None = None  # candidate already evaluated during proposal (MALA)


def _needs_prior(kind: ProposalKind) -> bool:
    return kind is not ProposalKind.PCN


def propose(spec: ProposalSpec, current: ChainState, post: Posterior, rng: np.random.Generator) -> Proposal:
    s, kind, x = spec.s, spec.kind, current.x
    if kind is ProposalKind.RW_IDENTITY:
        return Proposal(x + s * rng.standard_normal(x.shape), 0.0, 0.0)
    if kind is ProposalKind.RW_PRIOR:
        return Proposal(x + s * post.prior_noise(rng), 0.0, 0.0)
    if kind is ProposalKind.PCN:
        cand = post.mu + math.sqrt(max(1.0 - s * s, 0.0)) * (x - post.mu) + s * post.prior_noise(rng)
        return Proposal(cand, PRIOR_REVERSIBLE, PRIOR_REVERSIBLE)
    # MALA
    grad = current.grad if current.grad is not None else post.grad_log_posterior(x)
    mean_f = x + 0.5 * s * s * grad
    cand = mean_f + s * rng.standard_normal(x.shape)
    cstate = post.evaluate(cand, need_prior=True, need_grad=True)
    mean_b = cand + 0.5 * s * s * cstate.grad
    lq_f = -float(np.sum((cand - mean_f) ** 2)) / (2 * s * s)
    lq_b = -float(np.sum((x - mean_b) ** 2)) / (2 * s * s)
    return Proposal(cand, lq_f, lq_b, cstate)


def acceptance_log_ratio(kind: ProposalKind, current: ChainState, candidate: ChainState,
                         proposal: Proposal | None = None) -> float:
    """Log MH ratio; for pCN only the likelihood ratio enters."""
    kind = ProposalKind(kind)
    if kind is ProposalKind.PCN:
        return candidate.log_lik - current.log_lik
    r = (candidate.log_lik + candidate.log_prior) - (current.log_lik + current.log_prior)
    if kind is ProposalKind.MALA:
        if proposal is None:
            raise ValueError("MALA ratio needs the proposal densities")
        r += proposal.log_q_backward - proposal.log_q_forward
    return float(r)


def step(state: ChainState, spec: ProposalSpec, post: Posterior,
         rng: np.random.Generator) -> tuple[ChainState, bool]:
    prop = propose(spec, state, post, rng)
    cand = prop.state if prop.state is not None else post.evaluate(prop.x, need_prior=_needs_prior(spec.kind))
    log_r = acceptance_log_ratio(spec.kind, state, cand, prop)
    u = rng.uniform()
    if u == 0.0 or math.log(u) < log_r:
        return cand, True
    return state, False


def _initial_state(start, post: Posterior, spec: ProposalSpec, rng) -> ChainState:
    if isinstance(start, str):
        if start == "prior_mean":
            x0 = post.mu.copy()
        elif start == "prior_draw":
            x0 = post.sample_prior(rng)
        else:
            raise ValueError(f"unknown start mode {start!r}")
    elif isinstance(start, LatentState):
        x0 = start.to_array()
    else:
        x0 = np.asarray(start, dtype=float).reshape(3, post.n)
    return post.evaluate(x0, need_prior=_needs_prior(spec.kind), need_grad=spec.kind is ProposalKind.MALA)


@dataclass(frozen=True)
class ChainConfig:
    iterations: int
    proposal: ProposalSpec
    thin: int = 1
    burn_in: int | None = None  # None: first half of the iterations
    seed: int = 0
    start: object = "prior_mean"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        b = self.iterations // 2 if self.burn_in is None else int(self.burn_in)
        if not 0 <= b < self.iterations:
            raise ValueError("burn_in must lie in [0, iterations)")
        object.__setattr__(self, "burn_in", b)

    @property
    def n_samples(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass(frozen=True, eq=False)
class ChainOutput:
    grid: GridSpec
    samples: np.ndarray  # (M, 3, N)
    accepted: np.ndarray  # per iteration, bool
    log_lik: np.ndarray  # per iteration, after the accept step
    proposal: ProposalSpec
    burn_in: int
    thin: int
    seed: int = 0
    wall_time: float = 0.0
    tuning: "TuneResult | None" = None

    @property
    def iterations(self) -> int:
        return self.accepted.size

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if self.accepted.size else 0.0

    @property
    def acceptance_burn_in(self) -> float:
        a = self.accepted[:self.burn_in]
        return float(a.mean()) if a.size else float("nan")

    @property
    def acceptance_sampling(self) -> float:
        a = self.accepted[self.burn_in:]
        return float(a.mean()) if a.size else float("nan")

    @property
    def kept_iterations(self) -> np.ndarray:
        return self.burn_in + self.thin * np.arange(1, self.n_samples + 1) - 1

    @property
    def log_lik_trace(self) -> np.ndarray:
        """Log-likelihood at the stored samples."""
        return self.log_lik[self.kept_iterations]

    def latent(self, k: int) -> LatentState:
        return LatentState.from_array(self.samples[k])

    def reservoir(self, k: int):
        return to_reservoir(self.latent(k))


def run_chain(cfg: ChainConfig, post: Posterior, tuning: "TuneResult | None" = None) -> ChainOutput:
    """Run one chain; the clock covers the sampling loop only."""
    rng = np.random.default_rng(cfg.seed)
    spec = cfg.proposal
    state = _initial_state(cfg.start, post, spec, rng)
    samples = np.empty((cfg.n_samples, 3, post.n))
    accepted = np.zeros(cfg.iterations, dtype=bool)
    loglik = np.empty(cfg.iterations)
    k = 0
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        state, acc = step(state, spec, post, rng)
        accepted[it] = acc
        loglik[it] = state.log_lik
        if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0 and k < cfg.n_samples:
            samples[k] = state.x
            k += 1
    wall = time.perf_counter() - t0
    return ChainOutput(post.grid, samples, accepted, loglik, spec, cfg.burn_in, cfg.thin, cfg.seed, wall, tuning)


@dataclass(frozen=True)
class TuneResult:
    kind: ProposalKind
    s: float
    target: float
    rate: float
    warning: bool
    history: tuple = field(default=(), repr=False)

    @property
    def spec(self) -> ProposalSpec:
        return ProposalSpec(self.kind, self.s)


_DEFAULT_S0 = {
    ProposalKind.RW_IDENTITY: 0.1,
    ProposalKind.RW_PRIOR: 0.1,
    ProposalKind.PCN: 0.3,
    ProposalKind.MALA: 0.1,
}


def _clip_s(kind: ProposalKind, s: float) -> float:
    s = min(max(s, 1e-8), 1e3)
    return min(s, 1.0) if kind is ProposalKind.PCN else s


def _run_batch(state, spec, post, rng, n) -> tuple[ChainState, float]:
    acc = 0
    for _ in range(n):
        state, a = step(state, spec, post, rng)
        acc += a
    return state, acc / n


def tune_step_size(kind, post: Posterior, target: float | None = None, seed: int = 0,
                   s0: float | None = None, bracket_batch: int = 100, max_bracket: int = 12,
                   n_batches: int = 50, batch_size: int = 200, gain: float = 3.0,
                   eval_iterations: int = 5000, tolerance: float = 0.025, max_corrections: int = 3,
                   start="prior_mean") -> TuneResult:
    """Find a step size whose acceptance rate matches ``target``.

    Bracketing by factors of 3, then Robbins-Monro on ``log s`` with gain
    ``gain / t`` and Polyak averaging over the second half, then fresh
    evaluation runs (with secant corrections of ``log s`` while the rate is more
    than half the tolerance away).  If the final rate misses the target by more than
    ``tolerance`` the warning flag is set (for instance pCN with a flat
    likelihood, which accepts everything).
    """
    kind = ProposalKind(kind)
    target = DEFAULT_TARGETS[kind] if target is None else float(target)
    if not 0 < target < 1:
        raise ValueError("target acceptance rate must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    s = _clip_s(kind, _DEFAULT_S0[kind] if s0 is None else float(s0))
    state = _initial_state(start, post, ProposalSpec(kind, s), rng)
    history = []

    # phase A: bracket the target
    last_sign = 0
    for _ in range(max_bracket):
        state, rate = _run_batch(state, ProposalSpec(kind, s), post, rng, bracket_batch)
        history.append(("bracket", s, rate))
        sign = 1 if rate > target else -1
        if last_sign and sign != last_sign:
            break
        last_sign = sign
        new_s = _clip_s(kind, s * 3.0 if sign > 0 else s / 3.0)
        if new_s == s:
            break
        s = new_s

    # phase B: stochastic approximation on log s
    log_s = math.log(s)
    tail = []
    for t in range(1, n_batches + 1):
        s = _clip_s(kind, math.exp(log_s))
        state, rate = _run_batch(state, ProposalSpec(kind, s), post, rng, batch_size)
        history.append(("rm", s, rate))
        log_s = math.log(_clip_s(kind, math.exp(log_s + gain / t * (rate - target))))
        if t > n_batches // 2:
            tail.append(log_s)
    s = _clip_s(kind, math.exp(float(np.mean(tail)) if tail else log_s))

    # phase C: fresh evaluation runs; while a run is off by more than half the
    # tolerance, correct log s by a secant step through the last two runs
    # (slope clamped to a sane negative range, gain 1 before two runs exist)
    evals = []
    for attempt in range(max_corrections + 1):
        state, rate = _run_batch(state, ProposalSpec(kind, s), post, rng, eval_iterations)
        history.append(("eval", s, rate))
        evals.append((math.log(s), rate))
        if abs(rate - target) <= 0.5 * tolerance or attempt == max_corrections:
            break
        inv_slope = -1.0
        if len(evals) >= 2:
            (l0, r0), (l1, r1) = evals[-2], evals[-1]
            if l1 != l0:
                inv_slope = 1.0 / min(max((r1 - r0) / (l1 - l0), -5.0), -0.1)
        new_s = _clip_s(kind, math.exp(math.log(s) + inv_slope * (target - rate)))
        if new_s == s:
            break
        s = new_s
    warn = abs(rate - target) > tolerance
    if warn:
        warnings.warn(f"{kind.value}: tuned acceptance {rate:.3f} misses target {target:.3f}", RuntimeWarning)
    return TuneResult(kind, s, target, rate, warn, tuple(history))


def compare_proposals(post: Posterior, kinds, iterations: int, thin: int = 1, burn_in: int | None = None,
                      seed: int = 0, tune_kwargs: dict | None = None) -> list[dict]:
    """Tune each kernel, run equal-length chains and tabulate efficiency.

    Rows come back in the order of ``kinds``.  Each kernel ``k`` (0-based
    position) uses ``seed + k`` for both tuning and sampling.
    """
    from .diagnostics import mean_ess

    rows = []
    for idx, kind in enumerate(kinds):
        kind = ProposalKind.parse(kind) if isinstance(kind, str) else ProposalKind(kind)
        tuned = tune_step_size(kind, post, seed=seed + idx, **(tune_kwargs or {}))
        cfg = ChainConfig(iterations, tuned.spec, thin, burn_in, seed + idx)
        out = run_chain(cfg, post, tuned)
        ess = mean_ess(out).value
        rows.append({
            "proposal": kind.value,
            "s": tuned.s,
            "acceptance_rate": out.acceptance_sampling,
            "time": out.wall_time,
            "ess": ess,
            "ess_per_time": ess / out.wall_time if out.wall_time > 0 else float("inf"),
            "chain": out,
        })
    return rows


# --------------------------------------------------------------------------
# chain files

_MAGIC = b"CHNS"
_VERSION = 1
_HEADER = struct.Struct("<4sBIIIQQQ")


def save_chain(out: ChainOutput, path, sidecar=None) -> None:
    """``CHNS`` binary: magic, version, nx, ny, field count (3), sample count, thin, burn_in, samples.

    The optional sidecar CSV holds ``iteration,accept,loglik`` for every iteration.
    """
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, out.grid.nx, out.grid.ny, 3, out.n_samples, out.thin, out.burn_in))
        fh.write(np.ascontiguousarray(out.samples, dtype="<f8").tobytes())
    if sidecar is not None:
        with open(sidecar, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "accept", "loglik"])
            for i, (a, ll) in enumerate(zip(out.accepted, out.log_lik)):
                w.writerow([i, int(a), repr(float(ll))])


def load_chain(path) -> tuple[GridSpec, np.ndarray, int, int]:
    """Returns ``(grid, samples (M, 3, N), thin, burn_in)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated CHNS file")
    magic, version, nx, ny, k, m, thin, burn = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported CHNS version {version}")
    if k != 3:
        raise ValueError(f"expected 3 fields, found {k}")
    expected = _HEADER.size + 8 * m * k * nx * ny
    if len(raw) != expected:
        raise ValueError(f"CHNS payload has {len(raw)} bytes, expected {expected}")
    samples = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float).reshape(m, 3, nx * ny)
    return GridSpec(nx, ny), samples, thin, burn
