"""Model parameters, prediction and the weighted penalized objective.

A prediction at cell ``(i_1, ..., i_d)`` and time ``t`` is::

    sum_j h_j(t) prod_k P^k[i_k, j]  +  g_{e(t)}(t) prod_k q^k[group_k(i_k)]

with ``h_j(t) = alpha_j' B(t)`` and ``g_e(t) = beta_e' A(t)``.  Subjects
beyond the rows of ``P^k`` (never seen in training) have a zero individual
factor, so only the subgroup term remains for them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .correlation import CorrelationSpec, Whitener
from .exceptions import BoundsError, ConfigError
from .splines import SplineBasis
from .tensor import SubgroupScheme, TemporalTensor

__all__ = [
    "Bases",
    "ModelParams",
    "HyperParams",
    "DTRSModel",
    "individual_products",
    "subgroup_products",
    "predict",
    "predict_cell",
    "design_rows",
    "objective",
    "dumps",
]

MAX_RANK = 64
MAX_BASIS = 64


@dataclass(frozen=True)
class Bases:
    """Spline bases for the individual trends ``h_j`` and the time-subgroup trends ``g_e``."""

    h: SplineBasis
    g: SplineBasis | None = None

    def __post_init__(self):
        if self.g is None:
            object.__setattr__(self, "g", self.h)
        if self.h.size != self.g.size:
            raise ConfigError("h and g bases must have the same number of functions")
        if self.h.size > MAX_BASIS:
            raise ConfigError(f"basis size {self.h.size} exceeds {MAX_BASIS}")

    @property
    def size(self) -> int:
        return self.h.size

    def to_dict(self):
        return {"h": self.h.to_dict(), "g": self.g.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(SplineBasis.from_dict(d["h"]), SplineBasis.from_dict(d["g"]))


@dataclass(frozen=True)
class HyperParams:
    r: int = 3
    lam: float = 1.0
    epsilon: float = 1e-4
    max_iter: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.r <= MAX_RANK:
            raise ConfigError(f"r must lie in 1..{MAX_RANK}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Factor matrices ``P`` (n_k x r), subgroup factors ``q`` (m_k),
    spline coefficients ``alpha`` (r x M) and ``beta`` (m_time x M)."""

    P: tuple
    q: tuple
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        P = tuple(np.asarray(p, dtype=float) for p in self.P)
        q = tuple(np.asarray(v, dtype=float).ravel() for v in self.q)
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        r = alpha.shape[0]
        if len(P) != len(q):
            raise ConfigError("P and q must have one entry per mode")
        if any(p.ndim != 2 or p.shape[1] != r for p in P):
            raise ConfigError(f"every P^k must have {r} columns")
        if beta.shape[1] != alpha.shape[1]:
            raise ConfigError("alpha and beta must share the basis size")
        for a in P + q + (alpha, beta):
            a.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def rank(self) -> int:
        return self.alpha.shape[0]

    @property
    def order(self) -> int:
        return len(self.P)

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def with_block(self, block: str, value) -> "ModelParams":
        """Swap one named block: ``"P1"``.., ``"q1"``.., ``"alpha"`` or ``"beta"``."""
        if block in ("alpha", "beta"):
            return replace(self, **{block: value})
        kind, k = block[0], int(block[1:]) - 1
        blocks = list(self.P if kind == "P" else self.q)
        blocks[k] = value
        return replace(self, **{kind: tuple(blocks)})

    def penalty(self) -> float:
        return float(
            sum(np.sum(p**2) for p in self.P)
            + sum(np.sum(v**2) for v in self.q)
            + np.sum(self.alpha**2)
            + np.sum(self.beta**2)
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.P + self.q + (self.alpha, self.beta))

    def check(self, dims, scheme: SubgroupScheme, bases: Bases):
        if tuple(p.shape[0] for p in self.P) != tuple(dims):
            raise ConfigError("factor matrix rows do not match tensor dims")
        if tuple(v.size for v in self.q) != scheme.n_mode_groups:
            raise ConfigError("subgroup factor lengths do not match the scheme")
        if self.beta.shape[0] != scheme.n_time_groups:
            raise ConfigError("beta rows do not match the number of time subgroups")
        if self.alpha.shape[1] != bases.size:
            raise ConfigError("spline coefficient width does not match the basis size")

    def to_dict(self):
        return {
            "P": [p.tolist() for p in self.P],
            "q": [v.tolist() for v in self.q],
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        r = len(d["alpha"])
        P = tuple(np.asarray(p, dtype=float).reshape(-1, r) for p in d["P"])
        return cls(P, tuple(np.asarray(v) for v in d["q"]), np.asarray(d["alpha"]),
                   np.asarray(d["beta"]))


# -- prediction ----------------------------------------------------------------


def individual_products(P, index) -> np.ndarray:
    """``u[:, j] = prod_k P^k[i_k, j]``; rows for unseen subjects contribute 0."""
    index = np.asarray(index, dtype=np.int64)
    u = np.ones((index.shape[0], P[0].shape[1]))
    for k, p in enumerate(P):
        idx = index[:, k]
        known = idx < p.shape[0]
        rows = np.zeros((idx.size, p.shape[1]))
        rows[known] = p[idx[known]]
        u *= rows
    return u


def subgroup_products(q, scheme: SubgroupScheme, index) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    out = np.ones(index.shape[0])
    for k, v in enumerate(q):
        out *= v[scheme.subject_groups(k, index[:, k])]
    return out


def _check_index(index, order):
    index = np.atleast_2d(np.asarray(index, dtype=np.int64))
    if index.shape[1] != order:
        raise ConfigError(f"expected {order} mode indices per row")
    if index.size and index.min() < 0:
        raise BoundsError("negative mode index")
    return index


def predict(params: ModelParams, scheme: SubgroupScheme, bases: Bases, index, t) -> np.ndarray:
    """Vectorized prediction; ``index`` is ``(n, d)`` zero-based, ``t`` in [0, 1]."""
    index = _check_index(index, params.order)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    H = bases.h.design(t) @ params.alpha.T
    G = np.einsum("ij,ij->i", bases.g.design(t), params.beta[scheme.time_group(t)])
    u = individual_products(params.P, index)
    return np.einsum("ij,ij->i", H, u) + G * subgroup_products(params.q, scheme, index)


def predict_cell(params: ModelParams, scheme: SubgroupScheme, bases: Bases, indices, t) -> float:
    """Prediction for one cell given one-based ``indices`` at time ``t``."""
    idx = np.asarray(indices, dtype=np.int64).reshape(1, -1) - 1
    if idx.min() < 0:
        raise BoundsError(f"mode indices are one-based, got {tuple(indices)}")
    return float(predict(params, scheme, bases, idx, [t])[0])


def design_rows(params: ModelParams, scheme: SubgroupScheme, bases: Bases, index, t) -> np.ndarray:
    """Rows ``w`` with ``yhat = w' gamma``, ``gamma = (vec alpha, vec beta)``.

    Columns are ``u_1 B(t), ..., u_r B(t)`` followed by one ``A(t)``-sized
    slot per time subgroup, filled only for the subgroup of ``t`` and scaled
    by the subgroup-factor product.
    """
    index = _check_index(index, params.order)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    M = bases.size
    r, m = params.rank, params.beta.shape[0]
    u = individual_products(params.P, index)
    us = subgroup_products(params.q, scheme, index)
    W = np.zeros((t.size, (r + m) * M))
    W[:, : r * M] = (u[:, :, None] * bases.h.design(t)[:, None, :]).reshape(t.size, r * M)
    tg = scheme.time_group(t)
    A = bases.g.design(t) * us[:, None]
    cols = r * M + tg[:, None] * M + np.arange(M)
    W[np.arange(t.size)[:, None], cols] = A
    return W


def objective(params: ModelParams, tensor: TemporalTensor, scheme: SubgroupScheme, bases: Bases,
              corr: CorrelationSpec, lam: float) -> float:
    """Weighted residual sum of squares plus ``lam`` times the squared parameter norm."""
    params.check(tensor.dims, scheme, bases)
    resid = tensor.value - predict(params, scheme, bases, tensor.index, tensor.time)
    w = Whitener(corr, tensor.cell_starts, tensor.n_obs, times=tensor.time)(resid)
    return float(w @ w + lam * params.penalty())


# -- fitted model and serialization ---------------------------------------------


def _round(x):
    if isinstance(x, float):
        if not math.isfinite(x):
            return None
        return float(f"{x:.12g}")
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    if isinstance(x, np.ndarray):
        return _round(x.tolist())
    if isinstance(x, (np.floating,)):
        return _round(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def dumps(obj) -> str:
    """Byte-stable JSON: sorted keys, floats at 12 significant digits."""
    return json.dumps(_round(obj), sort_keys=True, indent=1) + "\n"


@dataclass(frozen=True, eq=False)
class DTRSModel:
    """A fitted model bundled with everything needed to predict."""

    params: ModelParams
    scheme: SubgroupScheme
    bases: Bases
    corr: CorrelationSpec
    lam: float
    dims: tuple
    time_range: tuple = (0.0, 1.0)
    meta: dict = field(default_factory=dict)

    def predict(self, index, t) -> np.ndarray:
        return predict(self.params, self.scheme, self.bases, index, t)

    def predict_tensor(self, tensor: TemporalTensor) -> np.ndarray:
        return self.predict(tensor.index, tensor.time)

    def rescale_time(self, t_original):
        lo, hi = self.time_range
        return (np.asarray(t_original, dtype=float) - lo) / ((hi - lo) or 1.0)

    def to_dict(self):
        return {
            "format": "dtrs-model/1",
            "dims": list(self.dims),
            "time_range": list(self.time_range),
            "lambda": self.lam,
            "scheme": self.scheme.to_dict(),
            "bases": self.bases.to_dict(),
            "correlation": self.corr.to_dict(),
            "params": self.params.to_dict(),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "dtrs-model/1":
            raise ConfigError("not a dtrs model file")
        return cls(
            ModelParams.from_dict(d["params"]),
            SubgroupScheme.from_dict(d["scheme"]),
            Bases.from_dict(d["bases"]),
            CorrelationSpec.from_dict(d["correlation"]),
            float(d["lambda"]),
            tuple(d["dims"]),
            tuple(d["time_range"]),
            d.get("meta", {}),
        )

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))
