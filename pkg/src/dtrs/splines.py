"""Polynomial spline bases on [0, 1].

The default family is the truncated power basis
``(1, t, ..., t^k, (t - v_1)_+^k, ..., (t - v_a)_+^k)``; a clamped B-spline
basis spanning the same space is available with ``kind="bspline"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import BoundsError, ConfigError, DegenerateKnotsError

__all__ = [
    "SplineBasis",
    "knot_count",
    "build_basis",
    "eval_basis",
    "mesh_ratio",
]

KNOT_NUDGE = 1e-9


def knot_count(n_cells: int, degree: int = 2) -> int:
    """Integer part of ``n_cells ** (1 / (2 * degree + 3))``."""
    if n_cells < 1 or degree < 1:
        raise ConfigError("need n_cells >= 1 and degree >= 1")
    power = 2 * degree + 3
    a = int(math.floor(n_cells ** (1.0 / power)))
    # exact integer correction of floating-point roots such as 128 ** (1/7)
    while (a + 1) ** power <= n_cells:
        a += 1
    while a > 0 and a**power > n_cells:
        a -= 1
    return a


def mesh_ratio(knots) -> float:
    """Largest over smallest gap of ``0 < knots < 1`` including the end points."""
    gaps = np.diff(np.concatenate([[0.0], np.asarray(knots, dtype=float), [1.0]]))
    return float(gaps.max() / gaps.min())


@dataclass(frozen=True)
class SplineBasis:
    degree: int = 2
    knots: tuple[float, ...] = ()
    kind: str = "truncated"
    placement: str = "equispaced"

    def __post_init__(self):
        knots = tuple(float(v) for v in self.knots)
        if self.degree < 1:
            raise ConfigError("spline degree must be >= 1")
        if self.kind not in ("truncated", "bspline"):
            raise ConfigError(f"unknown spline kind {self.kind!r}")
        if knots and (knots[0] <= 0.0 or knots[-1] >= 1.0):
            raise ConfigError("interior knots must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ConfigError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)

    @property
    def size(self) -> int:
        """Number of basis functions ``M = a_N + degree + 1``."""
        return len(self.knots) + self.degree + 1

    M = size

    @property
    def mesh_ratio(self) -> float:
        return mesh_ratio(self.knots)

    def __call__(self, t) -> np.ndarray:
        """Design matrix of shape ``(len(t), M)``; no domain check."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "bspline":
            k = self.degree
            full = np.concatenate([np.zeros(k + 1), self.knots, np.ones(k + 1)])
            return BSpline.design_matrix(np.clip(t, 0.0, 1.0), full, k).toarray()
        powers = t[:, None] ** np.arange(self.degree + 1)
        if not self.knots:
            return powers
        trunc = np.maximum(t[:, None] - np.asarray(self.knots), 0.0) ** self.degree
        return np.hstack([powers, trunc])

    def constant_coefficients(self) -> np.ndarray:
        """Coefficients that represent the constant function 1."""
        c = np.zeros(self.size)
        if self.kind == "bspline":
            c[:] = 1.0  # partition of unity
        else:
            c[0] = 1.0
        return c

    def design(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if t.size and (t.min() < 0.0 or t.max() > 1.0):
            raise BoundsError("spline argument outside [0, 1]; rescale times first")
        return self(t)

    def to_dict(self):
        return {
            "degree": self.degree,
            "knots": list(self.knots),
            "kind": self.kind,
            "placement": self.placement,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["degree"]), tuple(d["knots"]), d.get("kind", "truncated"),
                   d.get("placement", "equispaced"))


def build_basis(degree: int = 2, num_knots: int = 0, placement: str = "equispaced",
                times=None, kind: str = "truncated") -> SplineBasis:
    """Basis with ``num_knots`` interior knots.

    ``placement="equispaced"`` puts knots at ``i / (num_knots + 1)``;
    ``placement="quantile"`` uses the same probabilities on the empirical
    distribution of ``times``, nudging coincident knots apart by 1e-9.
    """
    if num_knots < 0:
        raise ConfigError("num_knots must be >= 0")
    probs = np.arange(1, num_knots + 1) / (num_knots + 1)
    if placement == "equispaced":
        knots = probs
    elif placement == "quantile":
        if times is None or np.size(times) == 0:
            raise ConfigError("quantile placement needs a sample of times")
        times = np.asarray(times, dtype=float)
        if np.unique(times).size < num_knots:
            raise DegenerateKnotsError(
                f"{np.unique(times).size} distinct times cannot place {num_knots} knots"
            )
        knots = np.quantile(times, probs)
        knots = np.clip(knots, KNOT_NUDGE, 1.0 - KNOT_NUDGE)
        for i in range(1, knots.size):
            if knots[i] <= knots[i - 1]:
                knots[i] = knots[i - 1] + KNOT_NUDGE
        if knots.size and knots[-1] >= 1.0:
            raise DegenerateKnotsError("quantile knots collapse onto the right boundary")
    else:
        raise ConfigError(f"unknown knot placement {placement!r}")
    return SplineBasis(int(degree), tuple(knots.tolist()), kind, placement)


def eval_basis(basis: SplineBasis, t: float) -> np.ndarray:
    """Basis vector at a single time ``t`` in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise BoundsError(f"t={t} outside [0, 1]")
    return basis(np.array([t]))[0]
