"""Sandwich covariance of the spline coefficients and pointwise prediction intervals.

With the fitted factors held fixed the prediction is linear in
``gamma = (alpha, beta)``: ``yhat = W gamma``.  The robust covariance is
``(Psi + lam I)^{-1} Phi (Psi + lam I)^{-1}`` with ``Psi = sum W' S^{-1} W``
and ``Phi`` the sum of outer products of per-cell scores
``W' S^{-1} (y - W gamma)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .correlation import Whitener
from .exceptions import ConfigError, RidgeDegenerateError
from .model import DTRSModel, design_rows
from .tensor import TemporalTensor

__all__ = [
    "SandwichCovariance",
    "IntervalEstimate",
    "sandwich_covariance",
    "normal_quantile",
    "prediction_interval",
    "prediction_intervals",
]


@dataclass(frozen=True, eq=False)
class SandwichCovariance:
    cov_gamma: np.ndarray
    psi_hat: np.ndarray
    phi_hat: np.ndarray
    sigma2_train: float
    asymmetry: float = 0.0

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_gamma), 0.0, None))

    def to_dict(self):
        return {"cov_gamma": self.cov_gamma.tolist(), "sigma2_train": self.sigma2_train}

    @classmethod
    def from_dict(cls, d):
        """Rebuild the parts needed for intervals (``psi_hat``/``phi_hat`` are not stored)."""
        cov = np.asarray(d["cov_gamma"], dtype=float)
        empty = np.full_like(cov, np.nan)
        return cls(cov, empty, empty, float(d["sigma2_train"]))


@dataclass(frozen=True)
class IntervalEstimate:
    yhat: float
    lower: float
    upper: float
    se_prediction: float
    level: float
    clamped: bool = False


def gamma_vector(model: DTRSModel) -> np.ndarray:
    return np.concatenate([model.params.alpha.ravel(), model.params.beta.ravel()])


def sandwich_covariance(model: DTRSModel, tensor: TemporalTensor) -> SandwichCovariance:
    """Robust covariance of the spline coefficients on the training tensor."""
    W = design_rows(model.params, model.scheme, model.bases, tensor.index, tensor.time)
    resid = tensor.value - W @ gamma_vector(model)
    whiten = Whitener(model.corr, tensor.cell_starts, tensor.n_obs, times=tensor.time)
    Ww = whiten(W)
    ew = whiten(resid)
    psi = Ww.T @ Ww
    scores = np.add.reduceat(Ww * ew[:, None], tensor.cell_starts, axis=0)
    phi = scores.T @ scores
    A = psi + model.lam * np.eye(psi.shape[0])
    try:
        L = np.linalg.cholesky(A)
        pivots = np.diag(L) ** 2
        if np.any(pivots <= 1e-12 * max(float(np.max(np.diag(A))), 1e-300)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        raise RidgeDegenerateError(
            "Psi + lambda I is singular; refit with a larger lambda"
        ) from None
    Linv = np.linalg.solve(L, np.eye(A.shape[0]))
    A_inv = Linv.T @ Linv
    cov = A_inv @ phi @ A_inv
    norm = max(float(np.max(np.abs(cov))), 1e-300)
    asym = float(np.max(np.abs(cov - cov.T))) / norm
    cov = 0.5 * (cov + cov.T)
    return SandwichCovariance(cov, psi, phi, float(np.mean(resid**2)), asym)


def normal_quantile(p):
    """Standard normal quantile function."""
    return ndtri(p)


def _z(level):
    if not 0.0 < level < 1.0:
        raise ConfigError("level must lie in (0, 1)")
    return float(normal_quantile(1.0 - (1.0 - level) / 2.0))


def prediction_intervals(model: DTRSModel, sandwich: SandwichCovariance, index, t,
                         level: float = 0.95):
    """Vectorized intervals; ``index`` zero-based ``(n, d)``.

    Returns ``(yhat, lower, upper, se, clamped)`` arrays.
    """
    z = _z(level)
    W = design_rows(model.params, model.scheme, model.bases, index, t)
    yhat = W @ gamma_vector(model)
    quad = np.einsum("ij,jk,ik->i", W, sandwich.cov_gamma, W)
    clamped = quad < 0
    se = np.sqrt(np.where(clamped, 0.0, quad) + sandwich.sigma2_train)
    return yhat, yhat - z * se, yhat + z * se, se, clamped


def prediction_interval(model: DTRSModel, sandwich: SandwichCovariance, indices, t,
                        level: float = 0.95) -> IntervalEstimate:
    """Interval at one cell (one-based ``indices``) and rescaled time ``t``."""
    idx = np.asarray(indices, dtype=np.int64).reshape(1, -1) - 1
    yhat, lo, hi, se, clamped = prediction_intervals(model, sandwich, idx, [t], level)
    return IntervalEstimate(float(yhat[0]), float(lo[0]), float(hi[0]), float(se[0]), level,
                            bool(clamped[0]))
