"""Stationary Gaussian random fields on a 2D torus via circulant embedding.

The covariance of a stationary field on an ``nx x ny`` torus is block
circulant, so it is diagonalised by the 2D DFT.  Everything here works with
the first row of that matrix (the *base*) and its eigenvalues; the dense
``N x N`` covariance is never formed.

DFT normalisation: ``numpy.fft.fft2`` is unnormalised and ``ifft2`` carries
the ``1/N`` factor.  With that convention ``fft2(sqrt(lam) * ifft2(z))`` is
exactly ``C^{1/2} z`` where ``lam = Re(fft2(base))``, so no compensating
constant is needed anywhere.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GridSpec",
    "CorrelationSpec",
    "CirculantBase",
    "NonEmbeddableSpectrumError",
    "SingularSpectrumError",
    "torus_distance_base",
    "build_base",
    "sample_field",
    "sample_fields",
    "log_density_quadform",
    "log_density_constant",
    "apply_precision",
    "dense_covariance",
    "save_base",
    "load_base",
]

EIG_CLAMP_TOL = 1e-8  # eta: relative size of a negative eigenvalue we still clamp
EIG_SINGULAR_TOL = 1e-12  # zeta: eigen_sqrt entries at or below this are singular
IMAG_TOL = 1e-8

_BASE_MAGIC = b"GRFB"
_BASE_VERSION = 1


class NonEmbeddableSpectrumError(ValueError):
    """The circulant base has a clearly negative eigenvalue."""


class SingularSpectrumError(ValueError):
    """The spectrum has (near) zero eigenvalues, so the density is undefined."""


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("grid dimensions must be integers")
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.nx}x{self.ny}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def index(self, i: int, j: int) -> int:
        return i * self.ny + j


@dataclass(frozen=True)
class CorrelationSpec:
    """Gaussian correlation ``rho(d) = exp(-3 (d / effective_range)^2)``.

    ``rho(effective_range) = exp(-3) ~ 0.05``.  ``scale`` replaces the 3 if a
    different effective-range convention is wanted.
    """

    sigma: float
    effective_range: float
    kind: str = "gaussian"
    scale: float = 3.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.effective_range > 0:
            raise ValueError("effective_range must be positive")
        if self.kind != "gaussian":
            raise ValueError(f"unsupported correlation kind {self.kind!r}")

    def correlation(self, d):
        d = np.asarray(d, dtype=float)
        return np.exp(-self.scale * (d / self.effective_range) ** 2)

    def covariance(self, d):
        return self.sigma**2 * self.correlation(d)


@dataclass(frozen=True, eq=False)
class CirculantBase:
    """Circulant covariance base and the square roots of its eigenvalues."""

    grid: GridSpec
    base: np.ndarray
    eigen_sqrt: np.ndarray
    n_clamped: int = 0
    inv_eigen_sqrt: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        base = np.array(self.base, dtype=float)
        eig = np.array(self.eigen_sqrt, dtype=float)
        if base.shape != self.grid.shape or eig.shape != self.grid.shape:
            raise ValueError("base and eigen_sqrt must have the grid shape")
        if np.any(eig < 0):
            raise ValueError("eigen_sqrt must be non-negative")
        inv = None
        if np.all(eig > EIG_SINGULAR_TOL):
            inv = 1.0 / eig
            inv.setflags(write=False)
        base.setflags(write=False)
        eig.setflags(write=False)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "eigen_sqrt", eig)
        object.__setattr__(self, "inv_eigen_sqrt", inv)

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eigen_sqrt**2

    @property
    def is_singular(self) -> bool:
        return self.inv_eigen_sqrt is None


def torus_distance_base(grid: GridSpec) -> np.ndarray:
    """Euclidean torus distance (in cells) from cell (0, 0) to every cell."""
    i = np.arange(grid.nx)
    j = np.arange(grid.ny)
    di = np.minimum(i, grid.nx - i).astype(float)
    dj = np.minimum(j, grid.ny - j).astype(float)
    return np.sqrt(di[:, None] ** 2 + dj[None, :] ** 2)


def build_base(grid: GridSpec, corr: CorrelationSpec, clamp_tol: float = EIG_CLAMP_TOL) -> CirculantBase:
    """Circulant base on torus distances and the square roots of its DFT eigenvalues.

    Negative eigenvalues no larger than ``clamp_tol * max eigenvalue`` in size
    are set to zero (with a warning); anything more negative means the
    correlation does not embed on this torus and raises.
    """
    base = corr.covariance(torus_distance_base(grid))
    lam = np.real(np.fft.fft2(base))
    lam_max = lam.max()
    if lam_max <= 0:
        raise NonEmbeddableSpectrumError("circulant base has no positive eigenvalue")
    negative = lam < 0
    if np.any(lam < -clamp_tol * lam_max):
        raise NonEmbeddableSpectrumError(
            f"eigenvalue {lam.min():.3e} below -{clamp_tol:g} * max eigenvalue"
        )
    n_clamped = int(negative.sum())
    if n_clamped:
        warnings.warn(f"clamped {n_clamped} negative eigenvalues to zero", RuntimeWarning)
    return CirculantBase(grid, base, np.sqrt(np.maximum(lam, 0.0)), n_clamped)


def _as_grid_array(v, grid: GridSpec, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size != grid.size:
        raise ValueError(f"{name} has length {v.size}, expected {grid.size}")
    return v.reshape(grid.shape)


def _filter(spectrum: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Re(fft2(spectrum * ifft2(v))) over the last two axes, with an imaginary-part check."""
    out = np.fft.fft2(spectrum * np.fft.ifft2(v))
    imag = np.abs(out.imag).max()
    if imag > IMAG_TOL * max(np.sqrt(np.sum(np.abs(out.real) ** 2)), 1e-300):
        raise FloatingPointError(f"imaginary residual {imag:.3e} after circulant filter")
    return out.real


def sample_field(base: CirculantBase, mu, noise) -> np.ndarray:
    """Draw ``mu + C^{1/2} z`` for a caller-supplied standard-normal ``noise``.

    Returns a flat row-major vector of length ``N``.
    """
    z = _as_grid_array(noise, base.grid, "noise")
    mu = _as_grid_array(mu, base.grid, "mu")
    return (mu + _filter(base.eigen_sqrt, z)).ravel()


def sample_fields(base: CirculantBase, mu, noise) -> np.ndarray:
    """Batched :func:`sample_field`: ``noise`` of shape ``(k, N)`` gives ``(k, N)`` fields."""
    z = np.asarray(noise, dtype=float)
    if z.ndim != 2 or z.shape[1] != base.grid.size:
        raise ValueError(f"noise must have shape (k, {base.grid.size})")
    mu = _as_grid_array(mu, base.grid, "mu")
    out = mu + _filter(base.eigen_sqrt, z.reshape((-1,) + base.grid.shape))
    return out.reshape(z.shape[0], -1)


def log_density_quadform(base: CirculantBase, mu, x) -> float:
    """``-0.5 * (x-mu)^T Sigma^{-1} (x-mu)``; the normalising constant is *not* included.

    See :func:`log_density_constant` for the missing term.
    """
    if base.is_singular:
        raise SingularSpectrumError(
            f"eigen_sqrt has entries <= {EIG_SINGULAR_TOL:g}; the density is undefined"
        )
    v = _as_grid_array(x, base.grid, "x") - _as_grid_array(mu, base.grid, "mu")
    u = _filter(base.inv_eigen_sqrt, v)
    return -0.5 * float(np.sum(u * u))


def log_density_constant(base: CirculantBase) -> float:
    """``-N/2 log(2 pi) - 1/2 log det Sigma`` from the DFT eigenvalues."""
    if base.is_singular:
        raise SingularSpectrumError("log det undefined for a singular spectrum")
    n = base.grid.size
    return -0.5 * n * np.log(2 * np.pi) - float(np.sum(np.log(base.eigen_sqrt)))


def apply_precision(base: CirculantBase, v) -> np.ndarray:
    """``Sigma^{-1} v`` as a flat vector."""
    if base.is_singular:
        raise SingularSpectrumError("precision undefined for a singular spectrum")
    v = _as_grid_array(v, base.grid, "v")
    return _filter(base.inv_eigen_sqrt**2, v).ravel()


def dense_covariance(base: CirculantBase) -> np.ndarray:
    """Dense ``N x N`` covariance rebuilt by circularly shifting the base (small grids only)."""
    nx, ny = base.grid.shape
    rows = np.empty((nx * ny, nx * ny))
    for i in range(nx):
        for j in range(ny):
            rows[i * ny + j] = np.roll(np.roll(base.base, i, axis=0), j, axis=1).ravel()
    return rows


_HEADER = struct.Struct("<4sBII")


def save_base(base: CirculantBase, path) -> None:
    """Write the ``GRFB`` binary: magic, version byte, nx, ny (u32 LE), base, eigen_sqrt (f64 LE)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_BASE_MAGIC, _BASE_VERSION, base.grid.nx, base.grid.ny))
        fh.write(base.base.astype("<f8").tobytes(order="C"))
        fh.write(base.eigen_sqrt.astype("<f8").tobytes(order="C"))


def load_base(path) -> CirculantBase:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated GRFB file")
    magic, version, nx, ny = _HEADER.unpack_from(raw)
    if magic != _BASE_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_BASE_MAGIC!r}")
    if version != _BASE_VERSION:
        raise ValueError(f"unsupported GRFB version {version}")
    n = nx * ny
    expected = _HEADER.size + 16 * n
    if len(raw) != expected:
        raise ValueError(f"GRFB payload has {len(raw)} bytes, expected {expected}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    grid = GridSpec(nx, ny)
    return CirculantBase(grid, vals[:n].reshape(nx, ny), vals[n:].reshape(nx, ny))
