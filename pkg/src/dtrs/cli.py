"""Command-line entry point: ``dtrs <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
Bulk data travels as long CSV, configs and models as JSON.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import FitConfig
from .exceptions import ConfigError, DTRSError, NumericalError, ParseError, ValidationError
from .evaluation import DEFAULT_METHODS, evaluate, run_replications
from .inference import SandwichCovariance, prediction_intervals, sandwich_covariance
from .model import DTRSModel, dumps
from .simulation import SimConfig, simulate
from .solver import fit_model, tune_lambda
from .tensor import SubgroupScheme, default_schema, export_long_csv, ingest_long_csv

log = logging.getLogger("dtrs")

THREADS_ENV = "DTRS_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg})", exc.lineno) from None


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _section(path, key):
    """JSON file contents, or its ``key`` entry when present (e.g. a truth file)."""
    if path is None:
        return None
    d = _read_json(path)
    return d[key] if isinstance(d, dict) and key in d else d


def _need_file(path):
    if not Path(path).is_file():
        raise ConfigError(f"file not found: {path}")
    return path


def _fit_config(args) -> FitConfig:
    cfg = FitConfig.load(_need_file(args.config)) if args.config else FitConfig()
    changes = {"seed": args.seed} if args.seed is not None else {}
    if getattr(args, "lam", None) is not None:
        changes["lam"] = args.lam
    return replace(cfg, **changes) if changes else cfg


def _load_training(args):
    schema = _section(args.schema, "schema")
    scheme = _section(args.scheme, "scheme")
    scheme = SubgroupScheme.from_dict(scheme) if scheme is not None else None
    dims = None if scheme is None else tuple(len(g) for g in scheme.mode_groups)
    if schema is None:
        schema = default_schema(len(dims)) if dims else None
    if schema is None:
        raise ConfigError("give --schema (column roles) or --scheme (subgroup layout)")
    tensor, found = ingest_long_csv(_need_file(args.data), schema, dims=dims)
    return tensor, scheme or found


def _model_schema(model: DTRSModel, args):
    schema = _section(getattr(args, "schema", None), "schema")
    if schema is None:
        schema = default_schema(len(model.dims))
    schema = dict(schema)
    schema["time_range"] = list(model.time_range)
    return schema


def _attach_sandwich(model, tensor):
    try:
        sandwich = sandwich_covariance(model, tensor)
    except NumericalError as exc:
        log.warning("no sandwich covariance stored: %s", exc)
        return model
    meta = dict(model.meta, sandwich=sandwich.to_dict())
    return replace(model, meta=meta)


def _stored_sandwich(model, args):
    if getattr(args, "data", None):
        tensor, _ = ingest_long_csv(_need_file(args.data), _model_schema(model, args),
                                    dims=model.dims)
        return sandwich_covariance(model, tensor)
    if "sandwich" not in model.meta:
        raise ConfigError("model has no stored sandwich covariance; pass --data <train.csv>")
    return SandwichCovariance.from_dict(model.meta["sandwich"])


def _load_model(path) -> DTRSModel:
    return DTRSModel.from_dict(_read_json(_need_file(path)))


def _read_query(path, model: DTRSModel, schema):
    modes, tcol = schema["modes"], schema["time"]
    index, times = [], []
    with open(_need_file(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in modes + [tcol] if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"missing columns {missing}", 1)
        for line, row in enumerate(reader, start=2):
            try:
                index.append([int(row[c]) for c in modes])
                times.append(float(row[tcol]))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"malformed row: {exc}", line) from None
    index = np.array(index, dtype=np.int64).reshape(-1, len(modes))
    return index, np.array(times), model.rescale_time(times)


# -- subcommands -------------------------------------------------------------------


def cmd_simulate(args):
    cfg = SimConfig.from_dict(_read_json(_need_file(args.config))) if args.config else SimConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    data = simulate(cfg)
    schema = default_schema(3, groups=True)
    schema["time_range"] = [0.0, 1.0]
    export_long_csv(data.train, args.out_train, data.scheme, schema)
    export_long_csv(data.test, args.out_test, data.scheme, schema)
    truth = dict(data.truth, schema=schema)
    _write(args.out_truth, dumps(truth))
    log.info("wrote %d training and %d test observations", data.train.n_obs, data.test.n_obs)


def cmd_fit(args):
    cfg = _fit_config(args)
    tensor, scheme = _load_training(args)
    model, report = fit_model(tensor, scheme, cfg)
    model = _attach_sandwich(model, tensor)
    _write(args.out_model, model.to_json())
    if args.out_report:
        _write(args.out_report, dumps(report.to_dict()))


def cmd_tune(args):
    cfg = _fit_config(args)
    tensor, scheme = _load_training(args)
    grid = [float(v) for v in args.grid.split(",")] if args.grid else None
    tuned = tune_lambda(tensor, scheme, cfg, grid, args.validation_count)
    model, report = fit_model(tensor, scheme, replace(cfg, lam=tuned.best_lambda))
    model = _attach_sandwich(model, tensor)
    _write(args.out_model, model.to_json())
    if args.out_report:
        out = {"tuning": tuned.to_dict(), "fit": report.to_dict()}
        _write(args.out_report, dumps(out))
    print(f"best lambda: {tuned.best_lambda:g}")


def cmd_predict(args):
    model = _load_model(args.model)
    schema = _model_schema(model, args)
    index, t_orig, t = _read_query(args.query, model, schema)
    yhat = model.predict(index - 1, t)
    _write_rows(args.out, schema, index, t_orig, {"yhat": yhat})


def cmd_intervals(args):
    model = _load_model(args.model)
    schema = _model_schema(model, args)
    sandwich = _stored_sandwich(model, args)
    index, t_orig, t = _read_query(args.query, model, schema)
    yhat, lo, hi, se, clamped = prediction_intervals(model, sandwich, index - 1, t, args.level)
    if np.any(clamped):
        log.warning("%d negative variance term(s) clamped to zero", int(clamped.sum()))
    _write_rows(args.out, schema, index, t_orig,
                {"yhat": yhat, "lower": lo, "upper": hi, "se": se})


def _write_rows(path, schema, index, t, columns):
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(schema["modes"]) + [schema["time"]] + list(columns))
        for i in range(len(t)):
            w.writerow([int(v) for v in index[i]] + [repr(float(t[i]))]
                       + [repr(float(col[i])) for col in columns.values()])


def cmd_evaluate(args):
    model = _load_model(args.model)
    tensor, _ = ingest_long_csv(_need_file(args.test), _model_schema(model, args),
                                dims=model.dims)
    sandwich = None
    if args.data or "sandwich" in model.meta:
        sandwich = _stored_sandwich(model, args)
    report = evaluate(model, tensor, sandwich, args.level)
    _write(args.out_report, dumps(report.to_dict()))
    if args.out_periods:
        keys = ["period", "time", "n", "rmse", "mae"] + (["picp"] if sandwich else [])
        with open(args.out_periods, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for row in report.per_period:
                w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                            for k in keys])
    print(f"rmse={report.rmse:.6f} mae={report.mae:.6f}"
          + (f" picp={report.picp:.4f}" if report.picp is not None else ""))


def cmd_bench(args):
    sim = SimConfig(T2=args.t2, error=args.structure)
    if args.sim_config:
        sim = replace(SimConfig.from_dict(_read_json(_need_file(args.sim_config))),
                      T2=args.t2, error=args.structure)
    names = args.methods.split(",")
    unknown = [n for n in names if n not in DEFAULT_METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {list(DEFAULT_METHODS)}")
    methods = {n: DEFAULT_METHODS[n] for n in names}
    table = run_replications(sim, methods, args.reps, args.seed or 0, not args.no_tune,
                             args.threads)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(args.out)
    if args.out_long:
        table.write_long_csv(args.out_long)
    print(table.format())


# -- parser ------------------------------------------------------------------------------


def _default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="single source of randomness (overrides config files)")
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker processes (default: ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for per-iteration MBI log lines")

    parser = _Parser(prog="dtrs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="draw a synthetic dataset")
    p.add_argument("--config", help="simulation JSON (defaults otherwise)")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--out-truth", required=True)
    p.set_defaults(func=cmd_simulate)

    for name, func, text in (("fit", cmd_fit, "fit at a fixed lambda"),
                             ("tune", cmd_tune, "pick lambda on trailing times, then refit")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True, help="training long CSV")
        p.add_argument("--config", help="fit config JSON")
        p.add_argument("--schema", help="column roles JSON (or a truth file holding one)")
        p.add_argument("--scheme", help="subgroup scheme JSON (or a truth file holding one)")
        p.add_argument("--out-model", required=True)
        p.add_argument("--out-report")
        if name == "fit":
            p.add_argument("--lambda", dest="lam", type=float, help="ridge weight")
        else:
            p.add_argument("--grid", help="comma-separated lambda values")
            p.add_argument("--validation-count", type=int, default=None,
                           help="trailing distinct times held out")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", parents=[common], help="point forecasts for a query CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True, help="CSV with index columns and time")
    p.add_argument("--schema")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("intervals", parents=[common], help="pointwise prediction intervals")
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--data", help="training CSV to recompute the sandwich covariance")
    p.add_argument("--schema")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_intervals)

    p = sub.add_parser("evaluate", parents=[common], help="score a model on test data")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--data", help="training CSV to recompute the sandwich covariance")
    p.add_argument("--schema")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out-report", required=True)
    p.add_argument("--out-periods")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-table1", parents=[common],
                       help="repeated simulation study with mean(sd) table")
    p.add_argument("--structure", choices=["independent", "ar1"], default="independent")
    p.add_argument("--t2", type=int, choices=[8, 12], default=8)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--methods", default="DTRSin,DTRSar")
    p.add_argument("--sim-config", help="override simulation defaults")
    p.add_argument("--no-tune", action="store_true", help="use each method's config lambda")
    p.add_argument("--out", required=True, help="aggregate table CSV")
    p.add_argument("--out-long", help="per-replication, per-period long CSV")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except DTRSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
