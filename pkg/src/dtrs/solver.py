"""Blockwise coordinate descent with maximum block improvement (MBI).

Every block of parameters enters the model linearly once the others are held
fixed, so each block update is an exact weighted ridge regression solved
through its normal equations after whitening the rows cell by cell.

One outer iteration computes candidate updates for the individual blocks
``P^1..P^d, alpha`` and accepts the one with the largest relative improvement
``J = 1 - L(candidate) / L(current)``, then does the same for the subgroup
blocks ``q^(1)..q^(d), beta``.  The fit stops once the largest of all these
improvements drops below ``epsilon``.
"""

from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .correlation import CorrelationSpec, Whitener, estimate_nuisance
from .exceptions import ConfigError, DivergenceError, NumericalError, RidgeDegenerateError, SplitError
from .model import Bases, DTRSModel, HyperParams, ModelParams
from .splines import build_basis, knot_count
from .tensor import SubgroupScheme, TemporalTensor

__all__ = [
    "FitReport",
    "Problem",
    "improvement",
    "initial_params",
    "default_bases",
    "update_individual_slice",
    "update_individual_factors",
    "update_subgroup_factors",
    "update_alpha",
    "update_beta",
    "fit",
    "fit_model",
    "align_permutation",
    "tune_lambda",
    "TuneResult",
]

log = logging.getLogger(__name__)

# relative pivot size below which a normal matrix is treated as singular
SINGULAR_RTOL = 1e-12


@dataclass
class FitReport:
    iterations: int = 0
    objective_trace: list = field(default_factory=list)
    accepted_blocks: list = field(default_factory=list)
    max_improvement: list = field(default_factory=list)
    converged: bool = False
    final_lambda: float = 0.0
    wallclock: float = 0.0
    frozen: dict = field(default_factory=dict)
    correlation: dict = field(default_factory=dict)
    pilot: "FitReport | None" = None

    def to_dict(self, timing: bool = False):
        """Plain dict; wall-clock time only with ``timing=True`` so that
        repeated runs serialize identically."""
        d = {
            "iterations": self.iterations,
            "objective_trace": list(self.objective_trace),
            "accepted_blocks": list(self.accepted_blocks),
            "max_improvement": list(self.max_improvement),
            "converged": self.converged,
            "final_lambda": self.final_lambda,
            "frozen": self.frozen,
            "correlation": self.correlation,
        }
        if timing:
            d["wallclock"] = self.wallclock
        if self.pilot is not None:
            d["pilot"] = self.pilot.to_dict(timing)
        return d


def improvement(candidate: float, previous: float) -> float:
    """Relative improvement ``1 - candidate / previous`` (0 once ``previous`` is 0)."""
    if previous == 0.0:
        return 0.0
    return 1.0 - candidate / previous


# -- linear algebra -------------------------------------------------------------


def _solve_spd(A, b, on_singular="raise", what="block"):
    """Solve ``A x = b`` for symmetric PSD ``A`` via Cholesky.

    Singular systems raise :class:`RidgeDegenerateError`, or with
    ``on_singular="pinv"`` return the minimum-norm least-squares solution.
    """
    try:
        L = np.linalg.cholesky(A)
        pivots = np.diagonal(L, axis1=-2, axis2=-1) ** 2
        top = np.max(np.diagonal(A, axis1=-2, axis2=-1), axis=-1, keepdims=True)
        ok = np.all(pivots > SINGULAR_RTOL * np.maximum(top, 1e-300), axis=-1)
    except np.linalg.LinAlgError:
        L, ok = None, np.zeros(A.shape[:-2], dtype=bool)
    if np.all(ok):
        y = np.linalg.solve(L, b[..., None])
        return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]
    if on_singular != "pinv":
        raise RidgeDegenerateError(
            f"singular normal equations for {what}; use a positive lambda"
        )
    if A.ndim == 2:
        return np.linalg.lstsq(A, b, rcond=None)[0]
    return np.stack([np.linalg.lstsq(a, v, rcond=None)[0] for a, v in zip(A, b)])


# -- problem data ---------------------------------------------------------------


class Problem:
    """Observation-level arrays shared by every block update.

    Built once per (tensor, scheme, bases, correlation); holds the basis
    rows, subgroup labels, the whitening operator and sparse subject
    indicators used to accumulate per-subject normal equations.
    """

    def __init__(self, tensor: TemporalTensor, scheme: SubgroupScheme, bases: Bases,
                 corr: CorrelationSpec):
        if scheme.order != tensor.order:
            raise ConfigError("scheme and tensor orders differ")
        if not scheme.covers(tensor.dims):
            raise ConfigError("subgroup scheme does not cover every subject of the tensor")
        self.tensor = tensor
        self.scheme = scheme
        self.bases = bases
        self.corr = corr
        self.dims = tensor.dims
        self.n = tensor.n_obs
        self.y = np.asarray(tensor.value)
        self.index = np.asarray(tensor.index)
        self.Bh = bases.h.design(tensor.time)
        self.Bg = bases.g.design(tensor.time)
        self.tg = scheme.time_group(tensor.time)
        self.groups = np.column_stack(
            [scheme.subject_groups(k, self.index[:, k]) for k in range(tensor.order)]
        ) if self.n else np.zeros((0, tensor.order), dtype=np.int64)
        self.m = scheme.n_mode_groups
        self.m_time = scheme.n_time_groups
        self.M = bases.size
        self.whiten = Whitener(corr, tensor.cell_starts, self.n, times=tensor.time)
        self.subject_counts = [np.bincount(self.index[:, k], minlength=n)
                               for k, n in enumerate(self.dims)]
        self.group_counts = [np.bincount(self.groups[:, k], minlength=m)
                             for k, m in enumerate(self.m)]
        self.time_counts = np.bincount(self.tg, minlength=self.m_time)
        rows = np.arange(self.n)
        self._indicators = [
            sp.csr_matrix((np.ones(self.n), (self.index[:, k], rows)), shape=(n, self.n))
            for k, n in enumerate(self.dims)
        ]

    def with_corr(self, corr: CorrelationSpec) -> "Problem":
        other = object.__new__(Problem)
        other.__dict__.update(self.__dict__)
        other.corr = corr
        other.whiten = Whitener(corr, self.tensor.cell_starts, self.n, times=self.tensor.time)
        return other

    def indicator(self, k):
        return self._indicators[k]


class _Terms:
    """Cached per-observation pieces of the prediction for one parameter set."""

    def __init__(self, prob: Problem, params: ModelParams):
        self.prob = prob
        self.params = params
        self.H = prob.Bh @ params.alpha.T
        self.G = np.einsum("ij,ij->i", prob.Bg, params.beta[prob.tg])
        self.rows = [p[prob.index[:, k]] for k, p in enumerate(params.P)]
        self.qv = [v[prob.groups[:, k]] for k, v in enumerate(params.q)]
        self.refresh()

    def refresh(self):
        u = np.ones((self.prob.n, self.params.rank))
        for rows in self.rows:
            u = u * rows
        us = np.ones(self.prob.n)
        for v in self.qv:
            us = us * v
        self.u, self.us = u, us
        self.ind = np.einsum("ij,ij->i", self.H, u)
        self.sub = self.G * us

    def others(self, k):
        out = self.H.copy()
        for kk, rows in enumerate(self.rows):
            if kk != k:
                out *= rows
        return out

    def other_q(self, k):
        out = self.G.copy()
        for kk, v in enumerate(self.qv):
            if kk != k:
                out *= v
        return out


def _loss(prob: Problem, resid, penalty, lam):
    w = prob.whiten(resid)
    return float(w @ w + lam * penalty)


# -- block updates ----------------------------------------------------------------


def _slice_normal_equations(prob: Problem, terms: _Terms, k: int):
    X = terms.others(k)
    Xw = prob.whiten(X)
    yw = prob.whiten(prob.y - terms.sub)
    r = X.shape[1]
    S = prob.indicator(k)
    outer = (Xw[:, :, None] * Xw[:, None, :]).reshape(prob.n, r * r)
    G = np.asarray(S @ outer).reshape(-1, r, r)
    b = np.asarray(S @ (Xw * yw[:, None]))
    return X, G, b


def update_individual_factors(prob: Problem, params: ModelParams, lam: float, mode: int,
                              on_singular="raise", terms=None) -> np.ndarray:
    """Exact minimizer over the whole factor matrix of ``mode`` (zero-based).

    Rows decouple across subjects, so all ridge systems are solved as one
    batch.  Subjects without observations get a zero row.
    """
    terms = terms or _Terms(prob, params)
    _, G, b = _slice_normal_equations(prob, terms, mode)
    r = params.rank
    seen = prob.subject_counts[mode] > 0
    out = np.zeros((prob.dims[mode], r))
    if np.any(seen):
        A = G[seen] + lam * np.eye(r)
        out[seen] = _solve_spd(A, b[seen], on_singular, f"P{mode + 1}")
    return out


def update_individual_slice(prob: Problem, params: ModelParams, lam: float, mode: int,
                            subject: int, on_singular="raise") -> np.ndarray:
    """Ridge update of one subject's factor row (``mode``/``subject`` zero-based)."""
    if prob.subject_counts[mode][subject] == 0:
        return np.zeros(params.rank)
    terms = _Terms(prob, params)
    hit = prob.index[:, mode] == subject
    X = terms.others(mode)
    Xw = prob.whiten(X)[hit]
    yw = prob.whiten(prob.y - terms.sub)[hit]
    A = Xw.T @ Xw + lam * np.eye(params.rank)
    return _solve_spd(A, Xw.T @ yw, on_singular, f"P{mode + 1}[{subject + 1}]")


def update_subgroup_factors(prob: Problem, params: ModelParams, lam: float, mode: int,
                            on_singular="raise", terms=None):
    """Exact ridge minimizer over ``q^(mode)``.

    Returns ``(q, frozen)`` where ``frozen`` marks subgroups with fewer than
    two observations; those keep their current value.
    """
    terms = terms or _Terms(prob, params)
    z = terms.other_q(mode)
    zw = prob.whiten(z)
    yw = prob.whiten(prob.y - terms.ind)
    g = prob.groups[:, mode]
    m = prob.m[mode]
    num = np.bincount(g, weights=zw * yw, minlength=m)
    den = np.bincount(g, weights=zw * zw, minlength=m) + lam
    frozen = prob.group_counts[mode] < 2
    q = np.array(params.q[mode], dtype=float)
    active = ~frozen
    tiny = den[active] <= SINGULAR_RTOL * max(float(np.max(den, initial=0.0)), 1e-300)
    if np.any(tiny) or np.any(den[active] == 0.0):
        if on_singular != "pinv":
            raise RidgeDegenerateError(
                f"singular normal equations for q{mode + 1}; use a positive lambda"
            )
        safe = np.where(den > 0, den, 1.0)
        q[active] = np.where(den[active] > 0, num[active] / safe[active], 0.0)
    else:
        q[active] = num[active] / den[active]
    return q, frozen


def _alpha_design(prob: Problem, u):
    return (u[:, :, None] * prob.Bh[:, None, :]).reshape(prob.n, -1)


def update_alpha(prob: Problem, params: ModelParams, lam: float, on_singular="raise",
                 terms=None) -> np.ndarray:
    """Exact ridge minimizer over all individual-trend coefficients (``r x M``)."""
    terms = terms or _Terms(prob, params)
    X = _alpha_design(prob, terms.u)
    Xw = prob.whiten(X)
    yw = prob.whiten(prob.y - terms.sub)
    A = Xw.T @ Xw + lam * np.eye(X.shape[1])
    a = _solve_spd(A, Xw.T @ yw, on_singular, "alpha")
    return a.reshape(params.rank, prob.M)


def _beta_design(prob: Problem, us):
    M = prob.M
    Z = np.zeros((prob.n, prob.m_time * M))
    cols = prob.tg[:, None] * M + np.arange(M)
    Z[np.arange(prob.n)[:, None], cols] = prob.Bg * us[:, None]
    return Z


def update_beta(prob: Problem, params: ModelParams, lam: float, on_singular="raise",
                terms=None):
    """Exact ridge minimizer over the time-subgroup coefficients.

    Returns ``(beta, frozen)``; time subgroups with fewer than two training
    observations keep their current coefficients.  The subgroups are solved
    jointly because correlated whitening couples neighbouring observations
    that fall in different time subgroups; under independence the system
    is block diagonal and this equals separate per-subgroup solves.
    """
    terms = terms or _Terms(prob, params)
    M = prob.M
    Z = _beta_design(prob, terms.us)
    frozen = prob.time_counts < 2
    free_cols = np.repeat(~frozen, M)
    target = prob.y - terms.ind
    beta = np.array(params.beta, dtype=float)
    if np.any(frozen):
        target = target - Z[:, ~free_cols] @ beta[frozen].ravel()
    Zw = prob.whiten(Z[:, free_cols])
    yw = prob.whiten(target)
    A = Zw.T @ Zw + lam * np.eye(Zw.shape[1])
    sol = _solve_spd(A, Zw.T @ yw, on_singular, "beta")
    beta[~frozen] = sol.reshape(-1, M)
    return beta, frozen


# -- fitting ------------------------------------------------------------------------


def default_bases(tensor: TemporalTensor, degree: int = 2, placement: str = "equispaced",
                  kind: str = "truncated", num_knots: int | None = None) -> Bases:
    """Shared basis for all trends with ``floor(N ** (1/(2 degree + 3)))`` knots."""
    a = knot_count(max(tensor.n_cells, 1), degree) if num_knots is None else int(num_knots)
    times = tensor.time if placement == "quantile" else None
    return Bases(build_basis(degree, a, placement, times=times, kind=kind))


def initial_params(prob: Problem, r: int, seed: int = 0) -> ModelParams:
    """Starting point: random ``N(0, 1/sqrt(r))`` factors (zero rows for
    unseen subjects), unit subgroup factors, and every trend equal to 1.

    Constant trends turn the first factor updates into a static CP fit.
    Zero trends would make every factor update shrink to zero and the
    individual component would never switch on.
    """
    rng = np.random.default_rng(seed)
    P = []
    for k, n in enumerate(prob.dims):
        p = rng.normal(0.0, 1.0 / np.sqrt(r), size=(n, r))
        p[prob.subject_counts[k] == 0] = 0.0
        P.append(p)
    q = tuple(np.ones(m) for m in prob.m)
    alpha = np.tile(prob.bases.h.constant_coefficients(), (r, 1))
    beta = np.tile(prob.bases.g.constant_coefficients(), (prob.m_time, 1))
    return ModelParams(tuple(P), q, alpha, beta)


def _block_names(prob, stage):
    d = len(prob.dims)
    if stage == "individual":
        return [f"P{k + 1}" for k in range(d)] + ["alpha"]
    return [f"q{k + 1}" for k in range(d)] + ["beta"]


def _candidate(prob, terms, lam, name, on_singular):
    """Exact block minimizer for ``name`` plus the resulting raw residual."""
    params = terms.params
    frozen = None
    if name == "alpha":
        value = update_alpha(prob, params, lam, on_singular, terms)
        resid = prob.y - _alpha_design(prob, terms.u) @ value.ravel() - terms.sub
    elif name == "beta":
        value, frozen = update_beta(prob, params, lam, on_singular, terms)
        sub = np.einsum("ij,ij->i", prob.Bg, value[prob.tg]) * terms.us
        resid = prob.y - terms.ind - sub
    elif name[0] == "P":
        k = int(name[1:]) - 1
        value = update_individual_factors(prob, params, lam, k, on_singular, terms)
        ind = np.einsum("ij,ij->i", terms.others(k), value[prob.index[:, k]])
        resid = prob.y - ind - terms.sub
    else:
        k = int(name[1:]) - 1
        value, frozen = update_subgroup_factors(prob, params, lam, k, on_singular, terms)
        resid = prob.y - terms.ind - terms.other_q(k) * value[prob.groups[:, k]]
    return value, resid, frozen


def _run_bcd(prob: Problem, params: ModelParams, hyper: HyperParams, schedule: str = "mbi",
             on_singular: str = "pinv") -> tuple[ModelParams, FitReport]:
    if schedule not in ("mbi", "cyclic"):
        raise ConfigError(f"unknown schedule {schedule!r}")
    lam = hyper.lam
    t0 = _time.perf_counter()
    terms = _Terms(prob, params)
    current = _loss(prob, prob.y - terms.ind - terms.sub, params.penalty(), lam)
    if not np.isfinite(current):
        raise DivergenceError("initial objective is not finite", block="init")
    report = FitReport(objective_trace=[current], final_lambda=lam)
    frozen_flags = {}

    def score(name):
        value, resid, frozen = _candidate(prob, terms, lam, name, on_singular)
        if frozen is not None and np.any(frozen):
            frozen_flags[name] = np.flatnonzero(frozen).tolist()
        cand = terms.params.with_block(name, value)
        loss = _loss(prob, resid, cand.penalty(), lam)
        if not np.isfinite(loss):
            raise DivergenceError(f"objective became non-finite in block {name}", block=name)
        return improvement(loss, current), loss, cand

    for it in range(1, hyper.max_iter + 1):
        all_j = []
        for stage in ("individual", "subgroup"):
            names = _block_names(prob, stage)
            if schedule == "cyclic":
                for name in names:
                    j, loss, cand = score(name)
                    all_j.append(j)
                    if j > 0:
                        terms, current = _Terms(prob, cand), loss
                        report.objective_trace.append(current)
                        report.accepted_blocks.append(name)
                continue
            scores = {name: score(name) for name in names}
            best = max(names, key=lambda nm: scores[nm][0])
            j, loss, cand = scores[best]
            all_j.extend(s[0] for s in scores.values())
            if j > 0:
                terms, current = _Terms(prob, cand), loss
                report.objective_trace.append(current)
                report.accepted_blocks.append(best)
            log.debug("iter=%d stage=%s block=%s objective=%.10g J=%.3g",
                      it, stage, best, current, j)
        report.iterations = it
        report.max_improvement.append(max(all_j))
        if max(all_j) < hyper.epsilon:
            report.converged = True
            break
    report.frozen = frozen_flags
    report.wallclock = _time.perf_counter() - t0
    log.info("fit finished: iterations=%d converged=%s objective=%.10g",
             report.iterations, report.converged, current)
    return terms.params, report


def align_permutation(params: ModelParams) -> ModelParams:
    """Permute factor columns (and matching ``alpha`` rows) so the first row of
    ``P^1`` is in descending order, ties broken by the following rows."""
    P1 = params.P[0]
    keys = [-P1[i] for i in reversed(range(P1.shape[0]))]
    order = np.lexsort(keys) if keys else np.arange(params.rank)
    if np.array_equal(order, np.arange(params.rank)):
        return params
    return params.replace(
        P=tuple(p[:, order] for p in params.P),
        alpha=params.alpha[order],
    )


def _residuals(prob, params):
    terms = _Terms(prob, params)
    return prob.y - terms.ind - terms.sub


def fit(tensor: TemporalTensor, scheme: SubgroupScheme, bases: Bases | None = None,
        corr: CorrelationSpec | str = "independence", hyper: HyperParams | None = None, *,
        init: ModelParams | None = None, estimate_corr: bool | None = None,
        nuisance_rounds: int = 1, schedule: str = "mbi", on_singular: str = "pinv",
        align: bool = True) -> tuple[ModelParams, FitReport]:
    """Fit the model by MBI block coordinate descent.

    Parameters
    ----------
    corr : CorrelationSpec or str
        A structure name means its nuisance parameters are estimated: an
        independence-weighted pilot fit supplies residuals for the moment
        estimators, then the weighted fit starts from the pilot solution.
        ``estimate_corr=True`` does the same for a spec (keeping its lag
        settings).
    init : ModelParams, optional
        Warm start; otherwise :func:`initial_params` with ``hyper.seed``.
    schedule : {"mbi", "cyclic"}
        "mbi" accepts only the best block per stage; "cyclic" accepts every
        improving block in turn.
    on_singular : {"pinv", "raise"}
        Fallback for singular normal equations (only possible with lam=0).

    Returns
    -------
    params : ModelParams
    report : FitReport
        ``report.correlation`` holds the working covariance actually used.
    """
    hyper = hyper or HyperParams()
    bases = bases or default_bases(tensor)
    if isinstance(corr, str):
        estimate = corr != "independence" if estimate_corr is None else estimate_corr
        corr = CorrelationSpec(corr)
    else:
        estimate = bool(estimate_corr)
    if estimate and corr.structure == "independence":
        estimate = False

    prob = Problem(tensor, scheme, bases, CorrelationSpec() if estimate else corr)
    params = init if init is not None else initial_params(prob, hyper.r, hyper.seed)
    params.check(tensor.dims, scheme, bases)
    if params.rank != hyper.r:
        raise ConfigError("initial parameters have the wrong rank")

    pilot = None
    if estimate:
        params, pilot = _run_bcd(prob, params, hyper, schedule, on_singular)
        for _ in range(max(1, nuisance_rounds)):
            resid = _residuals(prob, params)
            corr = estimate_nuisance(resid, corr.structure, cell_starts=tensor.cell_starts,
                                     lag=corr.lag, time_unit=corr.time_unit, times=tensor.time)
            log.info("estimated %s working correlation: rho=%.4f variance=%.4f",
                     corr.structure, corr.rho, corr.variance)
            prob = prob.with_corr(corr)
            params, report = _run_bcd(prob, params, hyper, schedule, on_singular)
        report.pilot = pilot
    else:
        params, report = _run_bcd(prob, params, hyper, schedule, on_singular)
    report.correlation = corr.to_dict()
    if align:
        params = align_permutation(params)
    return params, report


def fit_model(tensor: TemporalTensor, scheme: SubgroupScheme, config=None, *, init=None,
              bases: Bases | None = None) -> tuple[DTRSModel, FitReport]:
    """Config-driven :func:`fit` returning a self-contained :class:`DTRSModel`."""
    from .config import FitConfig

    config = config or FitConfig()
    bases = bases or default_bases(tensor, config.kappa, config.knots, config.basis,
                                   config.num_knots)
    params, report = fit(
        tensor, scheme, bases, config.correlation_spec(), config.hyper(),
        init=init, estimate_corr=config.rho is None and config.correlation != "independence",
        nuisance_rounds=config.nuisance_rounds, schedule=config.schedule,
    )
    model = DTRSModel(
        params, scheme, bases, CorrelationSpec.from_dict(report.correlation), config.lam,
        tensor.dims, tensor.time_range,
        meta={"config": config.to_dict(), "n_obs": tensor.n_obs, "n_cells": tensor.n_cells},
    )
    return model, report


@dataclass
class TuneResult:
    best_lambda: float
    table: list  # (lambda, validation rmse)
    failures: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)

    def to_dict(self):
        return {
            "best_lambda": self.best_lambda,
            "table": [{"lambda": lam, "rmse": rmse} for lam, rmse in self.table],
            "failures": self.failures,
        }


def tune_lambda(train: TemporalTensor, scheme: SubgroupScheme, config=None, grid=None,
                validation_count: int | None = None) -> TuneResult:
    """Pick the ridge weight minimizing RMSE on the trailing time points.

    The last ``validation_count`` distinct training times are held out; each
    grid value is fitted on the rest, warm-started from the previous grid
    value's solution.  Ties within 1e-12 go to the smaller lambda.
    """
    from dataclasses import replace as _replace

    from .config import FitConfig

    config = config or FitConfig()
    grid = list(config.lambda_grid if grid is None else grid)
    if not grid:
        raise ConfigError("empty lambda grid")
    count = config.validation_count if validation_count is None else validation_count
    head, tail = train.split_last_times(count)
    if tail.n_obs == 0 or head.n_obs == 0:
        raise SplitError("validation split left an empty side")
    bases = default_bases(head, config.kappa, config.knots, config.basis, config.num_knots)

    table, failures, reports, init = [], {}, [], None
    for lam in grid:
        cfg = _replace(config, lam=float(lam))
        try:
            model, report = fit_model(head, scheme, cfg, init=init, bases=bases)
        except NumericalError as exc:
            failures[str(lam)] = str(exc)
            table.append((float(lam), float("inf")))
            continue
        reports.append(report)
        init = model.params
        resid = tail.value - model.predict_tensor(tail)
        table.append((float(lam), float(np.sqrt(np.mean(resid**2)))))
        log.info("lambda=%g validation rmse=%.6f", lam, table[-1][1])
    finite = [(lam, e) for lam, e in table if np.isfinite(e)]
    if not finite:
        raise NumericalError("every lambda in the grid failed")
    best_err = min(e for _, e in finite)
    best = min(lam for lam, e in finite if e <= best_err + 1e-12)
    return TuneResult(best, table, failures, reports)
