"""Run configuration shared by the library helpers and the command line."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .correlation import STRUCTURES, CorrelationSpec
from .exceptions import ConfigError
from .model import HyperParams

__all__ = ["FitConfig", "DEFAULT_LAMBDA_GRID"]

# zero is left out: with few distinct times per time subgroup the subgroup
# trends are not identified at lambda = 0 and intervals cannot be formed
DEFAULT_LAMBDA_GRID = (1.0, 2.0, 5.0, 10.0, 20.0)


@dataclass(frozen=True)
class FitConfig:
    """Every knob of a fit; ``lambda`` is spelled ``lam`` in Python."""

    r: int = 3
    lam: float = 1.0
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    epsilon: float = 1e-4
    max_iter: int = 500
    seed: int = 0
    correlation: str = "independence"
    rho: float | None = None
    lag: str = "index"
    time_unit: float = 1.0
    kappa: int = 2
    knots: str = "equispaced"
    num_knots: int | None = None
    basis: str = "truncated"
    validation_count: int = 4
    schedule: str = "mbi"
    nuisance_rounds: int = 1

    def __post_init__(self):
        if self.correlation not in STRUCTURES:
            raise ConfigError(f"correlation must be one of {STRUCTURES}")
        if self.schedule not in ("mbi", "cyclic"):
            raise ConfigError("schedule must be 'mbi' or 'cyclic'")
        if self.knots not in ("equispaced", "quantile"):
            raise ConfigError("knots must be 'equispaced' or 'quantile'")
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        self.hyper()

    def hyper(self) -> HyperParams:
        return HyperParams(self.r, self.lam, self.epsilon, self.max_iter, self.seed)

    def correlation_spec(self) -> CorrelationSpec:
        return CorrelationSpec(self.correlation, self.rho or 0.0, 1.0, self.lag, self.time_unit)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["lambda_grid"] = list(self.lambda_grid)
        return d

    @classmethod
    def from_dict(cls, d) -> "FitConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "FitConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
