"""Time-varying tensor completion with subgroup factors.

Observations ``y_{i_1..i_d}(t)`` of a sparse tensor-valued function of time
are modelled as a rank-``r`` CP decomposition whose component weights are
spline functions of time, plus a subgroup term that lets subjects unseen in
training (cold starts) still receive forecasts.  Estimation is weighted
ridge regression by blockwise coordinate descent; prediction intervals come
from a sandwich covariance of the spline coefficients.
"""

from .config import DEFAULT_LAMBDA_GRID, FitConfig
from .correlation import CorrelationSpec, Whitener, estimate_nuisance
from .evaluation import evaluate, mae, picp, rmse, run_replications
from .exceptions import (
    ColdStartError,
    ConfigError,
    DTRSError,
    NumericalError,
    RidgeDegenerateError,
    ValidationError,
)
from .inference import (
    IntervalEstimate,
    SandwichCovariance,
    prediction_interval,
    prediction_intervals,
    sandwich_covariance,
)
from .model import Bases, DTRSModel, HyperParams, ModelParams, predict, predict_cell
from .simulation import SimConfig, simulate
from .solver import FitReport, fit, fit_model, tune_lambda
from .splines import SplineBasis, build_basis, knot_count
from .tensor import (
    Observation,
    SubgroupScheme,
    TemporalTensor,
    export_long_csv,
    ingest_long_csv,
)

__version__ = "0.1.0"

__all__ = [
    "Bases",
    "ColdStartError",
    "ConfigError",
    "CorrelationSpec",
    "DEFAULT_LAMBDA_GRID",
    "DTRSError",
    "DTRSModel",
    "FitConfig",
    "FitReport",
    "HyperParams",
    "IntervalEstimate",
    "ModelParams",
    "NumericalError",
    "Observation",
    "RidgeDegenerateError",
    "SandwichCovariance",
    "SimConfig",
    "SplineBasis",
    "SubgroupScheme",
    "TemporalTensor",
    "ValidationError",
    "Whitener",
    "build_basis",
    "estimate_nuisance",
    "evaluate",
    "export_long_csv",
    "fit",
    "fit_model",
    "ingest_long_csv",
    "knot_count",
    "mae",
    "picp",
    "predict",
    "predict_cell",
    "prediction_interval",
    "prediction_intervals",
    "rmse",
    "run_replications",
    "sandwich_covariance",
    "simulate",
    "tune_lambda",
]
