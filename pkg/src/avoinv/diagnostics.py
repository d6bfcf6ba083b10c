"""Chain and surrogate diagnostics.

Everything here is a pure function of stored data, so rerunning on a chain
loaded from disk reproduces the numbers exactly.

ESS uses the initial positive sequence: autocorrelations are summed from lag 1
up to (not including) the first negative one.  Quantiles are the linear
interpolation rule between order statistics (``numpy`` method ``"linear"``).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .fieldio import write_field_csv
from .grf_fft import GridSpec
from .model import QUANTITIES, saturations

__all__ = [
    "SeriesStats",
    "MeanEss",
    "sample_correlation",
    "mse",
    "acf",
    "ess",
    "series_stats",
    "mean_ess",
    "posterior_maps",
    "ternary_extract",
    "write_map_csv",
    "write_pgm",
    "write_ternary_csv",
]


class ConstantSeriesError(ValueError):
    pass


def sample_correlation(f, fhat) -> float:
    f = np.asarray(f, dtype=float).ravel()
    g = np.asarray(fhat, dtype=float).ravel()
    if f.size != g.size or f.size < 2:
        raise ValueError("need two sequences of equal length >= 2")
    a, b = f - f.mean(), g - g.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0 or sbb == 0:
        raise ValueError("correlation undefined for a zero-variance input")
    return float(np.clip((a @ b) / np.sqrt(saa * sbb), -1.0, 1.0))


def mse(f, fhat) -> float:
    f = np.asarray(f, dtype=float).ravel()
    g = np.asarray(fhat, dtype=float).ravel()
    if f.size != g.size:
        raise ValueError("sequences differ in length")
    d = f - g
    return float(d @ d) / d.size if d.size else 0.0


def acf(series, max_lag: int | None = None) -> np.ndarray:
    """Biased autocorrelation (every lag divided by the lag-0 sum), via FFT."""
    x = np.asarray(series, dtype=float).ravel()
    m = x.size
    max_lag = m - 1 if max_lag is None else int(max_lag)
    if not 0 <= max_lag < m:
        raise ValueError("max_lag must lie in [0, len(series))")
    x = x - x.mean()
    c0 = float(x @ x)
    if c0 == 0.0:
        raise ConstantSeriesError("autocorrelation of a constant series is undefined")
    nfft = 1 << (2 * m - 1).bit_length()
    fx = np.fft.rfft(x, nfft)
    c = np.fft.irfft(fx * np.conj(fx), nfft)[:max_lag + 1]
    return c / c0


def ess(series) -> float:
    x = np.asarray(series, dtype=float).ravel()
    m = x.size
    if m < 10:
        raise ValueError("ESS needs at least 10 values")
    rho = acf(x)
    neg = np.flatnonzero(rho[1:] < 0)
    k = neg[0] + 1 if neg.size else m
    tau = 1.0 + 2.0 * float(rho[1:k].sum())
    return float(min(m, m / tau)) if tau > 0 else float(m)


@dataclass(frozen=True)
class SeriesStats:
    acf: np.ndarray
    ess: float
    mean: float
    variance: float


def series_stats(series, max_lag: int | None = None) -> SeriesStats:
    x = np.asarray(series, dtype=float).ravel()
    return SeriesStats(acf(x, max_lag), ess(x), float(x.mean()), float(x.var()))


@dataclass(frozen=True)
class MeanEss:
    value: float
    per_coordinate: np.ndarray  # nan where the series was constant
    n_constant: int

    @property
    def flagged(self) -> bool:
        return self.n_constant > 0


def _samples(chain) -> np.ndarray:
    s = getattr(chain, "samples", chain)
    s = np.asarray(s, dtype=float)
    if s.ndim == 2:
        s = s[None]
    if s.ndim != 3 or s.shape[0] < 1:
        raise ValueError("expected samples shaped (M, 3, N)")
    return s


def mean_ess(chain) -> MeanEss:
    """Average ESS over all ``3N`` coordinate series; constant series are excluded and counted."""
    s = _samples(chain)
    flat = s.reshape(s.shape[0], -1)
    per = np.full(flat.shape[1], np.nan)
    for c in range(flat.shape[1]):
        col = flat[:, c]
        if np.ptp(col) == 0:
            continue
        per[c] = ess(col)
    n_const = int(np.isnan(per).sum())
    value = float(np.nanmean(per)) if n_const < per.size else float("nan")
    return MeanEss(value, per, n_const)


def _quantity(samples: np.ndarray, quantity: str) -> np.ndarray:
    if quantity not in QUANTITIES:
        raise KeyError(f"unknown quantity {quantity!r}; expected one of {QUANTITIES}")
    s_g, s_o, s_b, v = saturations(samples[:, 0], samples[:, 1], samples[:, 2])
    return {"S_g": s_g, "S_o": s_o, "S_b": s_b, "V_clay": v}[quantity]


def posterior_maps(chain, quantity: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell posterior mean and q90 - q10 of a reservoir quantity."""
    q = _quantity(_samples(chain), quantity)
    mean = q.mean(axis=0)
    q10, q90 = np.quantile(q, [0.1, 0.9], axis=0, method="linear")
    return mean, np.maximum(q90 - q10, 0.0)


def ternary_extract(chain, cell: int) -> np.ndarray:
    """``(M, 3)`` array of (S_g, S_o, S_b) at one cell."""
    s = _samples(chain)
    if not 0 <= cell < s.shape[2]:
        raise IndexError(f"cell {cell} outside 0..{s.shape[2] - 1}")
    s_g, s_o, s_b, _ = saturations(s[:, 0, cell], s[:, 1, cell], s[:, 2, cell])
    return np.column_stack([s_g, s_o, s_b])


def write_map_csv(path, grid: GridSpec, values) -> None:
    write_field_csv(path, grid, values)


def write_pgm(path, grid: GridSpec, values) -> None:
    """8-bit binary PGM, rows = i, columns = j.

    Grey level ``round(255 (v - min) / (max - min))``; a constant map is all 0.
    The min and max are recorded in a header comment.
    """
    v = np.asarray(values, dtype=float).reshape(grid.shape)
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    g = np.zeros(grid.shape) if span == 0 else np.rint(255.0 * (v - lo) / span)
    header = f"P5\n# min={lo!r} max={hi!r} scale=linear\n{grid.ny} {grid.nx}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.clip(g, 0, 255).astype(np.uint8).tobytes())


def write_ternary_csv(path, triples) -> None:
    t = np.asarray(triples, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "S_g", "S_o", "S_b"])
        for k, (a, b, c) in enumerate(t):
            w.writerow([k, repr(float(a)), repr(float(b)), repr(float(c))])
