"""Synthetic third-order tensor processes with known trends and subgroup factors.

Defaults reproduce the study design: 100 users x 9 contexts x 100 items,
subgroups (10, 3, 10) plus 4 time subgroups, rank 3, 12 training and 8 test
time points drawn from U(0, 1), 80% of entries missing and 30% of the items
appearing only in the test period.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import BoundsError, ConfigError
from .tensor import IntervalTimeGroups, SubgroupScheme, TemporalTensor

__all__ = ["SimConfig", "SimData", "trend_h", "trend_g", "simulate", "subgroup_truth"]


def trend_h(j: int, t):
    """Individual trend functions ``h_1..h_3``."""
    t = np.asarray(t, dtype=float)
    if j == 1:
        return np.sin(0.3 * np.pi * t)
    if j == 2:
        return 8.0 * t * (1.0 - t) - 1.0
    if j == 3:
        return np.cos(0.2 * np.pi * t) + 1.0
    raise BoundsError(f"trend h_{j} not defined (j in 1..3)")


def trend_g(e: int, t):
    """Time-subgroup trend functions ``g_1..g_4``."""
    t = np.asarray(t, dtype=float)
    if e == 1:
        return 2.0 * t - 1.0
    if e == 2:
        return 8.0 * (t - 0.5) ** 3
    if e == 3:
        return np.sin(0.1 * np.pi * t) + np.cos(np.pi * t)
    if e == 4:
        return -5.0 * np.exp(t) + 10.0
    raise BoundsError(f"trend g_{e} not defined (e in 1..4)")


def subgroup_truth(k: int, e):
    """True subgroup factor of one-based subgroup ``e`` in one-based mode ``k``."""
    e = np.asarray(e, dtype=float)
    intercept, slope = {1: (-1.0, 0.4), 2: (-1.2, 0.6), 3: (-0.4, 0.2)}[k]
    return intercept + slope * e


@dataclass(frozen=True)
class SimConfig:
    n: tuple = (100, 9, 100)
    m: tuple = (10, 3, 10, 4)
    r: int = 3
    T1: int = 12
    T2: int = 8
    pi_m: float = 0.8
    pi_cs: float = 0.3
    error: str = "independent"
    rho: float = 0.85
    seed: int = 0
    subject_assignment: str = "round_robin"
    time_assignment: str = "round_robin"

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "m", tuple(int(v) for v in self.m))
        if len(self.n) != 3 or len(self.m) != 4:
            raise ConfigError("simulation is third order: n has 3 entries, m has 4")
        if not 1 <= self.r <= 3:
            raise ConfigError("only three trend functions are defined (r <= 3)")
        if self.m[3] > 4 or any(mk < 1 or mk > nk for mk, nk in zip(self.m, self.n)):
            raise ConfigError("invalid subgroup counts")
        if not (0.0 <= self.pi_m < 1.0 and 0.0 <= self.pi_cs < 1.0):
            raise ConfigError("pi_m and pi_cs must lie in [0, 1)")
        if self.error not in ("independent", "ar1"):
            raise ConfigError("error must be 'independent' or 'ar1'")
        if not -1.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (-1, 1)")
        for name in ("subject_assignment", "time_assignment"):
            if getattr(self, name) not in ("round_robin", "contiguous"):
                raise ConfigError(f"{name} must be 'round_robin' or 'contiguous'")
        if self.T1 < 1 or self.T2 < 1:
            raise ConfigError("need at least one training and one test time point")

    @property
    def T(self) -> int:
        return self.T1 + self.T2

    @property
    def n_observed(self) -> int:
        return int(round(np.prod(self.n) * self.T * (1.0 - self.pi_m)))

    @property
    def n_cold(self) -> int:
        return int(math.ceil(self.pi_cs * self.n[2] - 1e-9))

    def to_dict(self):
        d = asdict(self)
        d["n"], d["m"] = list(self.n), list(self.m)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class SimData:
    train: TemporalTensor
    test: TemporalTensor
    scheme: SubgroupScheme
    truth: dict = field(default_factory=dict)


def _assign(count, groups, how):
    i = np.arange(count)
    if how == "round_robin":
        return i % groups
    return (i * groups) // count


def simulate(config: SimConfig | None = None, **overrides) -> SimData:
    """Draw one dataset; identical configs (including ``seed``) give identical data."""
    config = config or SimConfig()
    if overrides:
        config = SimConfig(**{**asdict(config), **overrides})
    n1, n2, n3 = config.n
    T, r = config.T, config.r
    rng = np.random.default_rng(config.seed)

    P = [rng.standard_normal((nk, r)) for nk in config.n]
    times = np.sort(rng.uniform(0.0, 1.0, size=T))
    if np.unique(times).size != T:
        raise ConfigError("duplicate simulated time points; change the seed")

    mode_groups = tuple(_assign(nk, mk, config.subject_assignment)
                        for nk, mk in zip(config.n, config.m[:3]))
    time_labels = _assign(T, config.m[3], config.time_assignment)
    time_groups = IntervalTimeGroups.from_labelled_times(times, time_labels, config.m[3])
    scheme = SubgroupScheme(mode_groups, time_groups, tuple(config.m[:3]))
    q = [subgroup_truth(k + 1, np.arange(1, config.m[k] + 1)) for k in range(3)]

    H = np.column_stack([trend_h(j + 1, times) for j in range(r)])
    G = np.array([trend_g(int(e) + 1, t) for e, t in zip(time_labels, times)])
    signal = np.einsum("aj,bj,cj,tj->abct", P[0], P[1], P[2], H)
    qa, qb, qc = (q[k][mode_groups[k]] for k in range(3))
    signal += np.einsum("a,b,c,t->abct", qa, qb, qc, G)

    if config.error == "independent":
        noise = rng.standard_normal((n1, n2, n3, T))
    else:
        z = rng.standard_normal((n1, n2, n3, T))
        noise = np.empty_like(z)
        noise[..., 0] = z[..., 0]
        scale = np.sqrt(1.0 - config.rho**2)
        for s in range(1, T):
            noise[..., s] = config.rho * noise[..., s - 1] + scale * z[..., s]
    y = signal + noise

    cold = np.arange(n3 - config.n_cold, n3)
    allowed = np.ones((n1, n2, n3, T), dtype=bool)
    allowed[:, :, cold, : config.T1] = False
    pool = np.flatnonzero(allowed.ravel())
    count = config.n_observed
    if count > pool.size:
        raise ConfigError(
            f"requested {count} observations but only {pool.size} entries are available"
        )
    picked = np.sort(rng.choice(pool, size=count, replace=False))
    a, b, c, s = np.unravel_index(picked, (n1, n2, n3, T))
    index = np.column_stack([a, b, c])
    values = y.ravel()[picked]

    is_train = s < config.T1
    train = TemporalTensor(config.n, index[is_train], times[s[is_train]], values[is_train])
    test = TemporalTensor(config.n, index[~is_train], times[s[~is_train]], values[~is_train])
    truth = {
        "config": config.to_dict(),
        "P": [p.tolist() for p in P],
        "q": [v.tolist() for v in q],
        "times": times.tolist(),
        "time_labels": time_labels.tolist(),
        "cold_items": (cold + 1).tolist(),
        "scheme": scheme.to_dict(),
    }
    return SimData(train, test, scheme, truth)
