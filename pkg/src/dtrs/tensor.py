"""Sparse tensor-valued functions of time and subgroup schemes.

A :class:`TemporalTensor` stores every observation ``y_{i_1...i_d}(t)`` as one
row of three flat arrays (mode indices, time, value), sorted by cell and then
by time.  Mode indices are zero-based inside the package; the CSV layer and
:class:`Observation` use the one-based convention of the data files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import (
    BoundsError,
    ColdStartError,
    ConfigError,
    ConflictError,
    ParseError,
    SplitError,
)

__all__ = [
    "Observation",
    "TemporalTensor",
    "IntervalTimeGroups",
    "PeriodicTimeGroups",
    "SubgroupScheme",
    "cell_index_sets",
    "ingest_long_csv",
    "export_long_csv",
    "default_schema",
    "load_schema",
]


@dataclass(frozen=True)
class Observation:
    """One observed entry: one-based ``indices``, rescaled ``time``, ``value``."""

    indices: tuple[int, ...]
    time: float
    value: float

    def __post_init__(self):
        if any(int(i) < 1 for i in self.indices):
            raise BoundsError(f"mode indices are one-based, got {self.indices}")
        if not 0.0 <= self.time <= 1.0:
            raise BoundsError(f"time {self.time} outside [0, 1]")


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class TemporalTensor:
    """Sparse d-th order tensor-valued process observed at arbitrary times.

    Parameters
    ----------
    dims : sequence of int
        Mode sizes ``(n_1, ..., n_d)``.
    index : (n_obs, d) int array
        Zero-based mode indices of each observation.
    time : (n_obs,) float array
        Observation times, already rescaled into [0, 1].
    value : (n_obs,) float array
    time_range : (float, float)
        Original ``(t_min, t_max)`` the times were rescaled from.

    Rows are sorted by cell then time on construction.  A repeated
    ``(cell, time)`` pair raises :class:`ConflictError`.
    """

    def __init__(self, dims, index, time, value, *, time_range=(0.0, 1.0), rejected=()):
        dims = tuple(int(n) for n in dims)
        index = np.asarray(index, dtype=np.int64)
        time = np.asarray(time, dtype=float).ravel()
        value = np.asarray(value, dtype=float).ravel()
        if index.ndim == 1:
            index = index.reshape(-1, len(dims))
        if index.shape != (time.size, len(dims)) or value.size != time.size:
            raise ConfigError(
                f"inconsistent shapes: index {index.shape}, time {time.shape}, value {value.shape}"
            )
        if index.size and (index.min() < 0 or np.any(index.max(axis=0) >= np.array(dims))):
            raise BoundsError(f"mode index outside dims {dims}")
        if time.size and (time.min() < 0.0 or time.max() > 1.0):
            raise BoundsError("observation time outside [0, 1]")
        if not np.all(np.isfinite(value)):
            raise ConfigError("non-finite observation value")

        order = np.lexsort((time,) + tuple(index[:, k] for k in reversed(range(len(dims)))))
        index, time, value = index[order], time[order], value[order]

        if time.size:
            new_cell = np.ones(time.size, dtype=bool)
            new_cell[1:] = np.any(index[1:] != index[:-1], axis=1)
        else:
            new_cell = np.zeros(0, dtype=bool)
        dup = ~new_cell[1:] & (time[1:] == time[:-1])
        if np.any(dup):
            k = int(np.flatnonzero(dup)[0]) + 1
            raise ConflictError(
                f"duplicate observation for cell {tuple(int(i) + 1 for i in index[k])} "
                f"at time {time[k]!r}"
            )

        self.dims = dims
        self.index = _readonly(index)
        self.time = _readonly(time)
        self.value = _readonly(value)
        self.cell_starts = _readonly(np.flatnonzero(new_cell))
        self.cell_id = _readonly(np.cumsum(new_cell) - 1)
        self.time_range = (float(time_range[0]), float(time_range[1]))
        self.rejected = tuple(rejected)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_observations(cls, observations: Iterable[Observation], dims=None, **kw):
        obs = list(observations)
        if not obs and dims is None:
            raise ConfigError("dims required for an empty tensor")
        d = len(dims) if dims is not None else len(obs[0].indices)
        index = np.array([o.indices for o in obs], dtype=np.int64).reshape(-1, d) - 1
        if dims is None:
            dims = index.max(axis=0) + 1
        return cls(
            dims,
            index,
            [o.time for o in obs],
            [o.value for o in obs],
            **kw,
        )

    def subset(self, mask) -> "TemporalTensor":
        mask = np.asarray(mask, dtype=bool)
        return TemporalTensor(
            self.dims,
            self.index[mask],
            self.time[mask],
            self.value[mask],
            time_range=self.time_range,
        )

    # -- views ----------------------------------------------------------------

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def n_obs(self) -> int:
        return self.time.size

    @property
    def n_cells(self) -> int:
        """``N = |Omega|``, the number of cells with at least one observation."""
        return self.cell_starts.size

    @property
    def cell_index(self) -> np.ndarray:
        """Zero-based indices of the observed cells, shape ``(N, d)``."""
        return self.index[self.cell_starts]

    @property
    def cell_sizes(self) -> np.ndarray:
        return np.diff(np.append(self.cell_starts, self.n_obs))

    @property
    def cells(self) -> dict:
        """Mapping one-based cell tuple -> list of ``(time, value)`` pairs."""
        out = {}
        bounds = np.append(self.cell_starts, self.n_obs)
        for c, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            key = tuple(int(i) + 1 for i in self.index[a])
            out[key] = list(zip(self.time[a:b].tolist(), self.value[a:b].tolist()))
        return out

    def observations(self):
        for i in range(self.n_obs):
            yield Observation(
                tuple(int(v) + 1 for v in self.index[i]), float(self.time[i]), float(self.value[i])
            )

    def original_time(self, t=None):
        """Map rescaled times back to the calendar units they were ingested in."""
        t = self.time if t is None else np.asarray(t, dtype=float)
        lo, hi = self.time_range
        return lo + t * (hi - lo)

    def distinct_times(self) -> np.ndarray:
        return np.unique(self.time)

    def split_last_times(self, count: int):
        """Split into (head, tail) where tail holds the last ``count`` distinct times."""
        times = self.distinct_times()
        if count <= 0 or count >= times.size:
            raise SplitError(
                f"cannot hold out {count} of {times.size} distinct time points"
            )
        cut = times[-count]
        return self.subset(self.time < cut), self.subset(self.time >= cut)

    def __repr__(self):
        return f"TemporalTensor(dims={self.dims}, n_cells={self.n_cells}, n_obs={self.n_obs})"

    def __eq__(self, other):
        if not isinstance(other, TemporalTensor):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.index, other.index)
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.value, other.value)
        )

    __hash__ = None


def cell_index_sets(tensor: TemporalTensor, mode: int, subject: int) -> set:
    """Observed cells whose ``mode``-th index equals ``subject`` (both one-based)."""
    if not 1 <= mode <= tensor.order:
        raise BoundsError(f"mode {mode} outside 1..{tensor.order}")
    if not 1 <= subject <= tensor.dims[mode - 1]:
        raise BoundsError(f"subject {subject} outside 1..{tensor.dims[mode - 1]}")
    cells = tensor.cell_index
    hit = cells[cells[:, mode - 1] == subject - 1]
    return {tuple(int(i) + 1 for i in row) for row in hit}


# -- time subgroups -------------------------------------------------------------


@dataclass(frozen=True)
class IntervalTimeGroups:
    """Piecewise-constant time -> subgroup map.

    ``labels[i]`` applies on ``[breakpoints[i-1], breakpoints[i])`` with the
    outer pieces extending to 0 and 1.
    """

    breakpoints: tuple[float, ...] = ()
    labels: tuple[int, ...] = (0,)
    n_groups: int | None = None

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        labels = tuple(int(v) for v in self.labels)
        if len(labels) != len(bp) + 1:
            raise ConfigError("need exactly one more label than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise ConfigError("time breakpoints must be strictly increasing")
        m = max(labels) + 1 if self.n_groups is None else int(self.n_groups)
        if min(labels) < 0 or max(labels) >= m:
            raise ConfigError("time labels out of range")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_groups", m)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(np.asarray(self.breakpoints), t, side="right")
        return np.asarray(self.labels, dtype=np.int64)[pos]

    @classmethod
    def from_labelled_times(cls, times, labels, n_groups=None):
        """Build from labelled sample times, switching label half-way between them."""
        times = np.asarray(times, dtype=float)
        labels = np.asarray(labels, dtype=np.int64)
        order = np.argsort(times, kind="stable")
        times, labels = times[order], labels[order]
        ut, first = np.unique(times, return_index=True)
        ul = labels[first]
        for a, b in zip(np.split(labels, first[1:]), ul):
            if np.any(a != b):
                raise ConflictError("one time point carries two different time subgroups")
        change = np.flatnonzero(ul[1:] != ul[:-1])
        bp = 0.5 * (ut[change] + ut[change + 1])
        keep = np.concatenate([[0], change + 1])
        return cls(tuple(bp.tolist()), tuple(ul[keep].tolist()), n_groups)

    def to_dict(self):
        return {
            "kind": "interval",
            "breakpoints": list(self.breakpoints),
            "labels": list(self.labels),
            "n_groups": self.n_groups,
        }


@dataclass(frozen=True)
class PeriodicTimeGroups:
    """Calendar-style map: subgroup ``floor((t - origin) / period) mod n_groups``."""

    period: float
    n_groups: int
    origin: float = 0.0

    def __post_init__(self):
        if self.period <= 0 or self.n_groups < 1:
            raise ConfigError("period must be positive and n_groups >= 1")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        # small guard keeps exact multiples of the period on the right side
        k = np.floor((t - self.origin) / self.period + 1e-9).astype(np.int64)
        return np.mod(k, self.n_groups)

    def to_dict(self):
        return {
            "kind": "periodic",
            "period": self.period,
            "n_groups": self.n_groups,
            "origin": self.origin,
        }


def time_groups_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "interval":
        return IntervalTimeGroups(tuple(d["breakpoints"]), tuple(d["labels"]), d.get("n_groups"))
    if kind == "periodic":
        return PeriodicTimeGroups(float(d["period"]), int(d["n_groups"]), float(d.get("origin", 0.0)))
    raise ConfigError(f"unknown time group kind {kind!r}")


@dataclass(frozen=True)
class SubgroupScheme:
    """Subject -> subgroup maps for every mode plus the time -> subgroup map.

    ``mode_groups[k][i]`` is the zero-based subgroup of zero-based subject ``i``
    of mode ``k``.  Arrays may cover more subjects than a training tensor
    (for example new items seen only at prediction time).
    """

    mode_groups: tuple
    time_groups: object = field(default_factory=IntervalTimeGroups)
    n_mode_groups: tuple | None = None

    def __post_init__(self):
        groups = tuple(_readonly(np.asarray(g, dtype=np.int64)) for g in self.mode_groups)
        if self.n_mode_groups is None:
            m = tuple(int(g.max()) + 1 if g.size else 1 for g in groups)
        else:
            m = tuple(int(v) for v in self.n_mode_groups)
        if len(m) != len(groups):
            raise ConfigError("n_mode_groups length differs from the number of modes")
        for k, (g, mk) in enumerate(zip(groups, m)):
            if mk < 1 or (g.size and (g.min() < 0 or g.max() >= mk)):
                raise ConfigError(f"mode {k + 1} subgroup labels outside 0..{mk - 1}")
        object.__setattr__(self, "mode_groups", groups)
        object.__setattr__(self, "n_mode_groups", m)

    @classmethod
    def uniform(cls, dims, n_time_groups=1):
        """Every subject in subgroup 0; time split into equal-width intervals."""
        bp = tuple(np.arange(1, n_time_groups) / n_time_groups)
        return cls(
            tuple(np.zeros(n, dtype=np.int64) for n in dims),
            IntervalTimeGroups(bp, tuple(range(n_time_groups))),
        )

    @property
    def order(self) -> int:
        return len(self.mode_groups)

    @property
    def n_time_groups(self) -> int:
        return int(self.time_groups.n_groups)

    def subject_groups(self, mode: int, subjects) -> np.ndarray:
        """Zero-based subgroups of zero-based ``subjects`` in ``mode`` (zero-based)."""
        subjects = np.asarray(subjects, dtype=np.int64)
        g = self.mode_groups[mode]
        bad = (subjects < 0) | (subjects >= g.size)
        if np.any(bad):
            s = int(subjects[bad][0]) + 1
            raise ColdStartError(f"subject {s} of mode {mode + 1} has no subgroup assignment")
        return g[subjects]

    def time_group(self, t) -> np.ndarray:
        return np.asarray(self.time_groups(t), dtype=np.int64)

    def covers(self, dims) -> bool:
        return all(g.size >= n for g, n in zip(self.mode_groups, dims))

    def to_dict(self):
        return {
            "mode_groups": [g.tolist() for g in self.mode_groups],
            "n_mode_groups": list(self.n_mode_groups),
            "time_groups": self.time_groups.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(np.asarray(g, dtype=np.int64) for g in d["mode_groups"]),
            time_groups_from_dict(d["time_groups"]),
            tuple(d["n_mode_groups"]) if d.get("n_mode_groups") is not None else None,
        )


# -- long-format CSV ------------------------------------------------------------

_SCHEMA_KEYS = {"modes", "time", "value", "groups", "time_group", "time_period", "time_range"}


def default_schema(order: int, groups: bool = False, time_group: bool = False) -> dict:
    schema = {
        "modes": [f"i{k + 1}" for k in range(order)],
        "time": "time",
        "value": "value",
    }
    if groups:
        schema["groups"] = [f"g{k + 1}" for k in range(order)]
    if time_group:
        schema["time_group"] = "tgroup"
    return schema


def load_schema(schema) -> dict:
    if isinstance(schema, (str, Path)):
        with open(schema, encoding="utf-8") as fh:
            schema = json.load(fh)
    schema = dict(schema)
    unknown = set(schema) - _SCHEMA_KEYS
    if unknown:
        raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
    for key in ("modes", "time", "value"):
        if key not in schema:
            raise ConfigError(f"schema missing required key {key!r}")
    if "groups" in schema and len(schema["groups"]) != len(schema["modes"]):
        raise ConfigError("schema 'groups' must align with 'modes' (use null for none)")
    return schema


def _encode_labels(raw: list[str]):
    """Map subgroup labels to zero-based codes (numeric labels are one-based)."""
    try:
        ints = [int(v) for v in raw]
    except ValueError:
        levels = sorted(set(raw))
        lookup = {v: i for i, v in enumerate(levels)}
        return np.array([lookup[v] for v in raw], dtype=np.int64), len(levels)
    codes = np.array(ints, dtype=np.int64) - 1
    if codes.size and codes.min() < 0:
        raise ParseError("numeric subgroup labels must be >= 1")
    return codes, int(codes.max()) + 1 if codes.size else 1


def ingest_long_csv(path, schema, *, dims=None, on_error: str = "raise"):
    """Read one-row-per-observation CSV into a tensor and a subgroup scheme.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : dict or path-like
        Column roles: ``modes`` (list), ``time``, ``value``; optional ``groups``
        (list aligned with ``modes``, entries may be null), ``time_group``
        (column of time subgroup labels), ``time_period`` (``{"period",
        "count", "origin"}`` in original time units) and ``time_range``
        (fixed ``[t_min, t_max]`` used for rescaling instead of the data range).
    dims : sequence of int, optional
        Mode sizes; by default the largest observed index of each mode.
    on_error : {"raise", "skip"}
        With "skip", malformed and duplicate rows are recorded in
        ``tensor.rejected`` as ``(line, reason)`` instead of raising.

    Returns
    -------
    tensor : TemporalTensor
    scheme : SubgroupScheme
    """
    schema = load_schema(schema)
    if on_error not in ("raise", "skip"):
        raise ConfigError("on_error must be 'raise' or 'skip'")
    modes = list(schema["modes"])
    d = len(modes)
    group_cols = list(schema.get("groups") or [None] * d)
    tg_col = schema.get("time_group")

    rows_idx, rows_t, rows_v, rows_g, rows_tg, lines = [], [], [], [], [], []
    rejected = []

    def reject(line, msg):
        if on_error == "raise":
            raise ParseError(msg, line)
        rejected.append((line, msg))

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("empty file: header row required", 1)
        need = modes + [schema["time"], schema["value"]]
        need += [c for c in group_cols if c] + ([tg_col] if tg_col else [])
        missing = [c for c in need if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"missing columns {missing}", 1)
        for line, row in enumerate(reader, start=2):
            try:
                idx = [int(row[c]) for c in modes]
                t = float(row[schema["time"]])
                v = float(row[schema["value"]])
            except (TypeError, ValueError) as exc:
                reject(line, f"malformed row: {exc}")
                continue
            if min(idx) < 1:
                reject(line, f"mode indices must be >= 1, got {idx}")
                continue
            if not (math.isfinite(t) and math.isfinite(v)):
                reject(line, "non-finite time or value")
                continue
            rows_idx.append(idx)
            rows_t.append(t)
            rows_v.append(v)
            rows_g.append([row[c] if c else "1" for c in group_cols])
            rows_tg.append(row[tg_col] if tg_col else None)
            lines.append(line)

    index = np.array(rows_idx, dtype=np.int64).reshape(-1, d) - 1
    t_raw = np.array(rows_t, dtype=float)
    value = np.array(rows_v, dtype=float)
    lines = np.array(lines, dtype=np.int64)

    if "time_range" in schema:
        t_lo, t_hi = (float(x) for x in schema["time_range"])
    elif t_raw.size:
        t_lo, t_hi = float(t_raw.min()), float(t_raw.max())
    else:
        t_lo, t_hi = 0.0, 1.0
    width = (t_hi - t_lo) or 1.0
    t = (t_raw - t_lo) / width
    t = np.where(np.abs(t) < 1e-12, 0.0, t)
    t = np.where(np.abs(t - 1.0) < 1e-12, 1.0, t)
    bad = (t < 0.0) | (t > 1.0)
    if np.any(bad):
        line = int(lines[bad][0])
        raise BoundsError(f"line {line}: time {t_raw[bad][0]!r} outside [{t_lo}, {t_hi}] after rescaling")

    # duplicate (cell, time) rows
    if t.size:
        order = np.lexsort((t,) + tuple(index[:, k] for k in reversed(range(d))))
        si, st = index[order], t[order]
        dup = np.all(si[1:] == si[:-1], axis=1) & (st[1:] == st[:-1])
        if np.any(dup):
            dup_rows = order[1:][dup]
            if on_error == "raise":
                raise ConflictError(
                    f"line {int(lines[dup_rows[0]])}: duplicate observation for cell "
                    f"{tuple(int(i) + 1 for i in index[dup_rows[0]])}"
                )
            keep = np.ones(t.size, dtype=bool)
            keep[dup_rows] = False
            for r in dup_rows:
                rejected.append((int(lines[r]), "duplicate (cell, time)"))
            index, t, value, lines = index[keep], t[keep], value[keep], lines[keep]
            rows_g = [g for g, k in zip(rows_g, keep) if k]
            rows_tg = [g for g, k in zip(rows_tg, keep) if k]
            t_raw = t_raw[keep]

    if dims is None:
        dims = tuple(int(v) + 1 for v in index.max(axis=0)) if index.size else (0,) * d
    tensor = TemporalTensor(
        dims, index, t, value, time_range=(t_lo, t_hi), rejected=sorted(rejected)
    )

    # subject subgroups
    mode_groups, m = [], []
    for k in range(d):
        g = np.zeros(dims[k], dtype=np.int64)
        if group_cols[k] is None:
            mode_groups.append(g)
            m.append(1)
            continue
        codes, mk = _encode_labels([row[k] for row in rows_g])
        seen = np.full(dims[k], -1, dtype=np.int64)
        for subj, code, line in zip(index[:, k], codes, lines):
            if seen[subj] >= 0 and seen[subj] != code:
                raise ConflictError(
                    f"line {int(line)}: subject {int(subj) + 1} of mode {k + 1} "
                    "assigned to two subgroups"
                )
            seen[subj] = code
        g[seen >= 0] = seen[seen >= 0]
        mode_groups.append(g)
        m.append(mk)

    if tg_col:
        codes, mt = _encode_labels(rows_tg)
        time_groups = IntervalTimeGroups.from_labelled_times(t, codes, mt)
    elif "time_period" in schema:
        spec = schema["time_period"]
        origin = float(spec.get("origin", t_lo))
        time_groups = PeriodicTimeGroups(
            float(spec["period"]) / width, int(spec["count"]), (origin - t_lo) / width
        )
    else:
        time_groups = IntervalTimeGroups()
    scheme = SubgroupScheme(tuple(mode_groups), time_groups, tuple(m))
    return tensor, scheme


def export_long_csv(tensor: TemporalTensor, path, scheme: SubgroupScheme | None = None,
                    schema: Mapping | None = None):
    """Write ``tensor`` as long-format CSV (times in original units)."""
    schema = dict(schema or default_schema(tensor.order, groups=scheme is not None))
    modes = schema["modes"]
    group_cols = schema.get("groups") if scheme is not None else None
    header = list(modes) + [schema["time"], schema["value"]]
    if group_cols:
        header += [c for c in group_cols if c]
    times = tensor.original_time()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(tensor.n_obs):
            idx = tensor.index[i]
            row = [int(v) + 1 for v in idx] + [repr(float(times[i])), repr(float(tensor.value[i]))]
            if group_cols:
                row += [
                    int(scheme.mode_groups[k][idx[k]]) + 1
                    for k, c in enumerate(group_cols)
                    if c
                ]
            w.writerow(row)
