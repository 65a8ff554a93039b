"""Forecast metrics and repeated simulation studies.

A replication draws one simulated dataset, tunes the ridge weight on the
trailing training times for every method, refits on the full training
tensor, and scores point forecasts (RMSE, MAE) and 95% intervals (PICP) on
the test period.  All methods of a replication see the same data.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import FitConfig
from .exceptions import ConfigError, NumericalError
from .inference import prediction_intervals, sandwich_covariance
from .model import DTRSModel
from .simulation import SimConfig, simulate
from .solver import FitReport, fit_model, tune_lambda
from .tensor import TemporalTensor

__all__ = [
    "MetricReport",
    "rmse",
    "mae",
    "picp",
    "evaluate",
    "objective_nonincreasing",
    "replicate",
    "run_replications",
    "ReplicationTable",
    "DEFAULT_METHODS",
]

log = logging.getLogger(__name__)

DEFAULT_METHODS = {
    "DTRSin": FitConfig(correlation="independence"),
    "DTRSar": FitConfig(correlation="ar1"),
}


def rmse(y, yhat) -> float:
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    if y.size == 0:
        raise ConfigError("no pairs to score")
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = np.asarray(y, dtype=float), np.asarray(yhat, dtype=float)
    if y.size == 0:
        raise ConfigError("no pairs to score")
    return float(np.mean(np.abs(y - yhat)))


def picp(y, lower, upper) -> float:
    """Share of ``y`` inside ``[lower, upper]`` (endpoints count as covered)."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ConfigError("no intervals to score")
    return float(np.mean((y >= np.asarray(lower)) & (y <= np.asarray(upper))))


def objective_nonincreasing(trace, rtol: float = 1e-10) -> bool:
    t = np.asarray(trace, dtype=float)
    return bool(np.all(t[1:] <= t[:-1] + rtol * np.abs(t[:-1])))


@dataclass
class MetricReport:
    rmse: float
    mae: float
    picp: float | None
    n: int
    per_period: list = field(default_factory=list)

    def to_dict(self):
        return {"rmse": self.rmse, "mae": self.mae, "picp": self.picp, "n": self.n,
                "per_period": self.per_period}


def evaluate(model: DTRSModel, test: TemporalTensor, sandwich=None,
             level: float = 0.95) -> MetricReport:
    """Score forecasts on ``test``; intervals only when ``sandwich`` is given.

    Periods are the distinct test times in increasing order.
    """
    if test.n_obs == 0:
        raise ConfigError("empty test tensor")
    if sandwich is None:
        yhat = model.predict_tensor(test)
        covered = None
    else:
        yhat, lo, hi, _, _ = prediction_intervals(model, sandwich, test.index, test.time, level)
        covered = (test.value >= lo) & (test.value <= hi)
    y = test.value
    times, period = np.unique(test.time, return_inverse=True)
    per = []
    for p, t in enumerate(times):
        sel = period == p
        row = {"period": p + 1, "time": float(t), "n": int(sel.sum()),
               "rmse": rmse(y[sel], yhat[sel]), "mae": mae(y[sel], yhat[sel])}
        if covered is not None:
            row["picp"] = float(covered[sel].mean())
        per.append(row)
    cover = None if covered is None else float(covered.mean())
    return MetricReport(rmse(y, yhat), mae(y, yhat), cover, int(y.size), per)


def _fit_summary(kind, report: FitReport, max_iter):
    out = [{
        "kind": kind,
        "lambda": report.final_lambda,
        "iterations": report.iterations,
        "converged": report.converged,
        "monotone": objective_nonincreasing(report.objective_trace),
        "max_iter": max_iter,
    }]
    if report.pilot is not None:
        out += _fit_summary(kind + "-pilot", report.pilot, max_iter)
    return out


def replicate(sim_config: SimConfig, methods: dict | None = None, tune: bool = True,
              level: float = 0.95) -> list:
    """Run every method on one simulated dataset; returns one row per method."""
    methods = methods or DEFAULT_METHODS
    data = simulate(sim_config)
    rows = []
    for name, cfg in methods.items():
        row = {"seed": sim_config.seed, "method": name, "status": "ok"}
        try:
            fits = []
            if tune:
                tuned = tune_lambda(data.train, data.scheme, cfg)
                cfg = replace(cfg, lam=tuned.best_lambda)
                for rep in tuned.reports:
                    fits += _fit_summary("tune", rep, cfg.max_iter)
            model, report = fit_model(data.train, data.scheme, cfg)
            fits += _fit_summary("final", report, cfg.max_iter)
            metrics = evaluate(model, data.test, sandwich_covariance(model, data.train), level)
        except NumericalError as exc:
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            continue
        row.update(
            rmse=metrics.rmse, mae=metrics.mae, picp=metrics.picp, lam=cfg.lam,
            rho=model.corr.rho, fits=fits, per_period=metrics.per_period,
        )
        log.info("seed=%d %s rmse=%.4f mae=%.4f picp=%.4f lambda=%g", sim_config.seed, name,
                 metrics.rmse, metrics.mae, metrics.picp, cfg.lam)
        rows.append(row)
    return rows


def _replicate_args(args):
    return replicate(*args)


def run_replications(sim_config: SimConfig | None = None, methods: dict | None = None,
                     reps: int = 10, base_seed: int = 0, tune: bool = True,
                     workers: int = 1) -> "ReplicationTable":
    """Replication ``i = 1..reps`` uses simulation seed ``base_seed + i``;
    results do not depend on ``workers``."""
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    sim_config = sim_config or SimConfig()
    methods = methods or DEFAULT_METHODS
    jobs = [(replace(sim_config, seed=base_seed + i), methods, tune) for i in range(1, reps + 1)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_replicate_args, jobs))
    else:
        chunks = [_replicate_args(job) for job in jobs]
    return ReplicationTable([row for chunk in chunks for row in chunk])


METRICS = ("rmse", "mae", "picp")


@dataclass
class ReplicationTable:
    rows: list

    def methods(self):
        return list(dict.fromkeys(row["method"] for row in self.rows))

    def metric(self, method, name) -> np.ndarray:
        return np.array([row[name] for row in self.rows
                         if row["method"] == method and row["status"] == "ok"])

    def summary(self) -> dict:
        """Mean and standard deviation across replications for each method.

        Failed replications are left out, with a warning.
        """
        out = {}
        for method in self.methods():
            failed = sum(1 for row in self.rows
                         if row["method"] == method and row["status"] != "ok")
            if failed:
                warnings.warn(f"{method}: {failed} failed replication(s) excluded",
                              RuntimeWarning, stacklevel=2)
            stats = {"count": int(self.metric(method, "rmse").size), "failed": failed}
            for name in METRICS:
                v = self.metric(method, name)
                if v.size == 0:
                    stats[name] = (float("nan"), float("nan"))
                    continue
                sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
                stats[name] = (float(np.mean(v)), sd)
            out[method] = stats
        return out

    def format(self) -> str:
        """Plain-text table with ``mean(sd)`` cells."""
        summary = self.summary()
        lines = [f"{'method':<10}{'RMSE':>16}{'MAE':>16}{'PICP':>16}{'runs':>6}"]
        for method, stats in summary.items():
            cells = [f"{stats[k][0]:.3f}({stats[k][1]:.3f})" for k in METRICS]
            lines.append(f"{method:<10}" + "".join(f"{c:>16}" for c in cells)
                         + f"{stats['count']:>6}")
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "metric", "mean", "sd", "runs"])
            for method, stats in self.summary().items():
                for name in METRICS:
                    mean, sd = stats[name]
                    w.writerow([method, name, repr(mean), repr(sd), stats["count"]])

    def to_dict(self):
        return {"rows": self.rows,
                "summary": {m: {k: list(v) if isinstance(v, tuple) else v
                                for k, v in s.items()}
                            for m, s in self.summary().items()}}

    def write_long_csv(self, path):
        """One row per (seed, method, metric, period); period 0 is the whole test set."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "method", "status", "metric", "period", "time", "value"])
            for row in self.rows:
                if row["status"] != "ok":
                    w.writerow([row["seed"], row["method"], row["status"], "", "", "", ""])
                    continue
                for name in METRICS:
                    w.writerow([row["seed"], row["method"], "ok", name, 0, "", repr(row[name])])
                for per in row["per_period"]:
                    for name in METRICS:
                        if name in per:
                            w.writerow([row["seed"], row["method"], "ok", name, per["period"],
                                        repr(per["time"]), repr(per[name])])
