"""Working covariance ``Sigma = v R`` for the observations of one cell.

``R`` is the identity, exchangeable, or AR-1 in the position of an
observation within its (time-sorted) cell.  Whitening never forms
``Sigma^{-1}``: AR-1 uses its bidiagonal inverse Cholesky factor and
exchangeable the closed-form inverse square root of ``(1-rho) I + rho 11'``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .exceptions import ConfigError, InsufficientDataError, NotPositiveDefiniteError

__all__ = [
    "CorrelationSpec",
    "Whitener",
    "correlation_matrix",
    "covariance_factor",
    "whiten",
    "estimate_nuisance",
]

STRUCTURES = ("independence", "exchangeable", "ar1")
RHO_CLAMP = 0.99


@dataclass(frozen=True)
class CorrelationSpec:
    """Working correlation structure with its nuisance parameters.

    ``lag="time"`` switches AR-1 from position lags to time gaps measured in
    units of ``time_unit``: ``R_ij = rho ** (|t_i - t_j| / time_unit)``.
    """

    structure: str = "independence"
    rho: float = 0.0
    variance: float = 1.0
    lag: str = "index"
    time_unit: float = 1.0

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ConfigError(f"unknown correlation structure {self.structure!r}")
        if not -1.0 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (-1, 1), got {self.rho}")
        if not self.variance > 0.0:
            raise ConfigError("variance must be positive")
        if self.lag not in ("index", "time") or self.time_unit <= 0:
            raise ConfigError("lag must be 'index' or 'time' with a positive time_unit")
        if self.lag == "time" and self.structure == "ar1" and self.rho < 0:
            raise ConfigError("time-lag AR-1 needs rho >= 0")

    def to_dict(self):
        return {
            "structure": self.structure,
            "rho": self.rho,
            "variance": self.variance,
            "lag": self.lag,
            "time_unit": self.time_unit,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _lags(n, gaps):
    if gaps is None:
        pos = np.arange(n, dtype=float)
    else:
        gaps = np.asarray(gaps, dtype=float)
        if gaps.shape != (n - 1,):
            raise ConfigError(f"need {n - 1} gaps for a cell of size {n}")
        pos = np.concatenate([[0.0], np.cumsum(gaps)])
    return np.abs(pos[:, None] - pos[None, :])


def correlation_matrix(spec: CorrelationSpec, n: int, gaps=None) -> np.ndarray:
    """Dense ``n x n`` working correlation matrix.

    ``gaps`` (length ``n-1``) overrides unit position lags for AR-1.
    """
    if n < 1:
        raise ConfigError("cell size must be >= 1")
    if spec.structure == "independence":
        return np.eye(n)
    if spec.structure == "exchangeable":
        if n > 1 and spec.rho <= -1.0 / (n - 1):
            raise NotPositiveDefiniteError(
                f"exchangeable rho={spec.rho} is not positive definite for n={n}"
            )
        return spec.rho + (1.0 - spec.rho) * np.eye(n)
    return spec.rho ** _lags(n, gaps)


def covariance_factor(spec: CorrelationSpec, n: int, gaps=None) -> np.ndarray:
    """Dense ``L`` with ``Sigma = L L'`` matching :class:`Whitener` (tests/diagnostics)."""
    sd = np.sqrt(spec.variance)
    if spec.structure == "independence":
        return sd * np.eye(n)
    if spec.structure == "exchangeable":
        R = correlation_matrix(spec, n)
        w, V = np.linalg.eigh(R)
        return sd * (V * np.sqrt(w)) @ V.T
    lag = _lags(n, gaps)
    steps = np.ones(n - 1) if gaps is None else np.asarray(gaps, dtype=float)
    col = np.concatenate([[1.0], np.sqrt(1.0 - spec.rho ** (2 * steps))])
    L = np.tril(spec.rho**lag) * col[None, :]
    return sd * L


class Whitener:
    """Applies ``Sigma^{-1/2}`` cell by cell to rows of a flat observation array.

    Parameters
    ----------
    spec : CorrelationSpec
    cell_starts : int array
        Offsets where each cell begins; rows are time-sorted within cells.
    n_obs : int
    times : float array, optional
        Needed only for ``lag="time"``.
    """

    def __init__(self, spec: CorrelationSpec, cell_starts, n_obs: int, times=None):
        self.spec = spec
        self.n_obs = int(n_obs)
        starts = np.asarray(cell_starts, dtype=np.int64)
        first = np.zeros(self.n_obs, dtype=bool)
        first[starts] = True
        self._scale = 1.0 / np.sqrt(spec.variance)
        self._kind = spec.structure
        if spec.structure == "ar1" and spec.rho != 0.0:
            if spec.lag == "time":
                if times is None:
                    raise ConfigError("time-lag AR-1 whitening needs observation times")
                gap = np.diff(np.asarray(times, dtype=float), prepend=0.0) / spec.time_unit
                a = np.where(first, 0.0, spec.rho ** np.where(first, 1.0, gap))
            else:
                a = np.where(first, 0.0, spec.rho)
            if np.any(a >= 1.0):
                raise NotPositiveDefiniteError("AR-1 factor degenerate for zero time gap")
            self._a = a
            self._s = 1.0 / np.sqrt(1.0 - a**2)
        elif spec.structure == "exchangeable" and spec.rho != 0.0:
            sizes = np.diff(np.append(starts, self.n_obs))
            if np.any(sizes > 1) and spec.rho <= -1.0 / (sizes.max() - 1):
                raise NotPositiveDefiniteError(
                    f"exchangeable rho={spec.rho} is not positive definite for n={sizes.max()}"
                )
            c = 1.0 - np.sqrt((1.0 - spec.rho) / (1.0 - spec.rho + sizes * spec.rho))
            self._starts = starts
            self._sizes = sizes
            self._c = np.repeat(c / sizes, sizes)
            self._scale /= np.sqrt(1.0 - spec.rho)
        else:
            self._kind = "independence"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n_obs:
            raise ConfigError(f"expected {self.n_obs} rows, got {x.shape[0]}")
        if self._kind == "independence":
            return x * self._scale
        if self._kind == "ar1":
            prev = np.empty_like(x)
            prev[0] = 0.0
            prev[1:] = x[:-1]
            a = self._a if x.ndim == 1 else self._a[:, None]
            s = self._s if x.ndim == 1 else self._s[:, None]
            return (x - a * prev) * (s * self._scale)
        sums = np.add.reduceat(x, self._starts, axis=0)
        mean_part = np.repeat(sums, self._sizes, axis=0)
        c = self._c if x.ndim == 1 else self._c[:, None]
        return (x - c * mean_part) * self._scale


def whiten(spec: CorrelationSpec, n: int, x, gaps=None):
    """Whiten one cell's vector or ``(n, p)`` matrix."""
    times = None
    if gaps is not None and spec.structure == "ar1":
        times = np.concatenate([[0.0], np.cumsum(gaps)]) * spec.time_unit
        spec = replace(spec, lag="time")
    return Whitener(spec, [0], n, times=times)(x)


def _flatten(residuals, cell_starts):
    if cell_starts is not None:
        return np.asarray(residuals, dtype=float), np.asarray(cell_starts, dtype=np.int64)
    cells = [np.atleast_1d(np.asarray(r, dtype=float)) for r in residuals]
    sizes = np.array([c.size for c in cells], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return (np.concatenate(cells) if cells else np.zeros(0)), starts


def estimate_nuisance(residuals, structure: str, *, cell_starts=None, lag: str = "index",
                      time_unit: float = 1.0, times=None) -> CorrelationSpec:
    """Residual-based moment estimates of the working-covariance parameters.

    ``residuals`` is a list of per-cell residual vectors in time order, or a
    flat array when ``cell_starts`` gives the cell offsets.  The variance is the mean
    squared residual; ``rho`` is the mean within-cell pair product (adjacent
    pairs for AR-1, all pairs for exchangeable) divided by the variance and
    clamped to [-0.99, 0.99].
    """
    r, starts = _flatten(residuals, cell_starts)
    if r.size == 0:
        raise InsufficientDataError("no residuals")
    variance = float(np.mean(r**2))
    if structure == "independence":
        return CorrelationSpec("independence", 0.0, max(variance, 1e-300))
    sizes = np.diff(np.append(starts, r.size))
    if not np.any(sizes >= 2):
        raise InsufficientDataError(f"{structure} needs at least one cell with two residuals")
    if variance == 0.0:
        return CorrelationSpec(structure, 0.0, 1e-300, lag, time_unit)

    if structure == "exchangeable":
        sums = np.add.reduceat(r, starts)
        sq = np.add.reduceat(r**2, starts)
        pair_sum = 0.5 * np.sum(sums**2 - sq)
        n_pairs = 0.5 * np.sum(sizes * (sizes - 1))
        rho = pair_sum / n_pairs / variance
    elif structure == "ar1":
        first = np.zeros(r.size, dtype=bool)
        first[starts] = True
        linked = ~first[1:]
        products = (r[1:] * r[:-1])[linked]
        if lag == "time":
            if times is None:
                raise ConfigError("time-lag estimation needs observation times")
            t = np.asarray(times, dtype=float)
            g = (np.diff(t) / time_unit)[linked]
            target = products / variance

            def loss(p):
                return float(np.sum((target - p**g) ** 2))

            rho = minimize_scalar(loss, bounds=(0.0, RHO_CLAMP), method="bounded").x
        else:
            rho = products.mean() / variance
    else:
        raise ConfigError(f"unknown correlation structure {structure!r}")
    rho = float(np.clip(rho, -RHO_CLAMP, RHO_CLAMP))
    if lag == "time" and structure == "ar1":
        rho = max(rho, 0.0)
    return CorrelationSpec(structure, rho, variance, lag, time_unit)
