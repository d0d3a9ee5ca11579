"""Data model, parameter containers and file I/O.

A dataset is stored as a dense matrix of predictor members (one column per
member, grouped by source) plus a vector of observations.  Source 0 is the
observed variable itself and always has a single member.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

GAUSSIAN = "gaussian"
PRECIPITATION = "precipitation"
VARIABLE_KINDS = (GAUSSIAN, PRECIPITATION)

CSV_HEADER = ("time", "source_id", "member_id", "value")


class DataError(ValueError):
    """Base class for input and validation problems."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class DomainError(DataError):
    pass


class ValidationError(DataError):
    pass


class NumericalError(RuntimeError):
    """Base class for failures inside the numerical routines."""


@dataclass(frozen=True)
class SourceSpec:
    source_id: int
    member_count: int
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if self.source_id < 0:
            raise SchemaError(f"source_id must be >= 0, got {self.source_id}")
        if self.member_count < 1:
            raise SchemaError(
                f"source {self.source_id}: member_count must be >= 1")
        if self.source_id == 0 and self.member_count != 1:
            raise SchemaError("source 0 (observations) must have one member")


def normalize_schema(schema: Iterable[SourceSpec]) -> tuple[SourceSpec, ...]:
    """Sort a schema by source id and make sure source 0 is present."""
    specs = sorted(schema, key=lambda s: s.source_id)
    ids = [s.source_id for s in specs]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"duplicate source ids in schema: {ids}")
    if not ids or ids[0] != 0:
        specs.insert(0, SourceSpec(0, 1, "observation"))
    if len(specs) < 2:
        raise SchemaError("schema needs at least one predictor source")
    return tuple(specs)


class Layout:
    """Column bookkeeping for the stacked member matrix.

    Column 0 holds the observation, the following columns hold the members
    of sources 1..E in schema order.  ``source_of_col`` maps every column to
    its position ``e`` in the schema.
    """

    def __init__(self, schema: Sequence[SourceSpec]):
        self.schema = normalize_schema(schema)
        self.counts = np.array([s.member_count for s in self.schema])
        self.source_ids = [s.source_id for s in self.schema]
        self.n_sources = len(self.schema) - 1
        self.source_of_col = np.repeat(np.arange(len(self.schema)),
                                       self.counts)
        self.n_cols = int(self.counts.sum())
        # indicator matrix: column sums per source through a matmul
        self.indicator = np.zeros((self.n_cols, len(self.schema)))
        self.indicator[np.arange(self.n_cols), self.source_of_col] = 1.0
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])

    def columns(self, e: int) -> slice:
        return slice(self.offsets[e], self.offsets[e + 1])

    def predictor_layout(self):
        """Same layout with the observation column dropped."""
        return _PredictorLayout(self)

    def __eq__(self, other):
        return isinstance(other, Layout) and self.schema == other.schema

    def __repr__(self):
        return f"Layout({list(self.counts)})"


class _PredictorLayout:
    def __init__(self, full: Layout):
        self.full = full
        self.counts = full.counts[1:]
        self.source_of_col = full.source_of_col[1:] - 1
        self.indicator = full.indicator[1:, 1:]
        self.n_cols = full.n_cols - 1


@dataclass(frozen=True)
class ForecastCase:
    time_index: int
    members: Mapping[int, np.ndarray]
    observation: Optional[float] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Multi-source ensemble forecasts for one lead time and one location.

    Attributes
    ----------
    schema : tuple of SourceSpec
        Source 0 first.
    times : ndarray of int, shape (n,)
    members : ndarray, shape (n, sum of K_e for e >= 1)
        Members of every predictor source, grouped by source.
    observations : ndarray, shape (n,)
        NaN where no observation is available.
    """

    schema: tuple
    times: np.ndarray
    members: np.ndarray
    observations: np.ndarray
    variable_kind: str = GAUSSIAN
    lead_time: int = 0
    location: str = ""
    layout: Layout = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        schema = normalize_schema(self.schema)
        object.__setattr__(self, "schema", schema)
        layout = Layout(schema)
        object.__setattr__(self, "layout", layout)
        times = np.asarray(self.times, dtype=np.int64).reshape(-1)
        members = np.asarray(self.members, dtype=float)
        obs = np.asarray(self.observations, dtype=float).reshape(-1)
        n = times.size
        if members.size == 0:
            members = members.reshape(n, layout.n_cols - 1)
        if members.shape != (n, layout.n_cols - 1) or obs.shape != (n,):
            raise SchemaError(
                f"member matrix {members.shape} / observations {obs.shape} "
                f"do not match {n} cases and {layout.n_cols - 1} members")
        if n > 1 and np.any(np.diff(times) <= 0):
            raise SchemaError("time indexes must be strictly increasing")
        if not np.all(np.isfinite(members)):
            raise DomainError("member values must be finite")
        if self.variable_kind not in VARIABLE_KINDS:
            raise ValidationError(f"unknown variable kind {self.variable_kind!r}")
        if self.variable_kind == PRECIPITATION:
            if np.any(members < 0) or np.any(obs[~np.isnan(obs)] < 0):
                raise DomainError("precipitation values must be >= 0")
        for name, arr in (("times", times), ("members", members),
                          ("observations", obs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_cases(cls, schema, cases: Sequence[ForecastCase], **kwargs):
        layout = Layout(schema)
        n = len(cases)
        members = np.empty((n, layout.n_cols - 1))
        obs = np.full(n, np.nan)
        for i, case in enumerate(cases):
            for e in range(1, len(layout.schema)):
                sid = layout.source_ids[e]
                if sid not in case.members:
                    raise SchemaError(
                        f"time {case.time_index}: missing source {sid}")
                vals = np.asarray(case.members[sid], dtype=float).reshape(-1)
                if vals.size != layout.counts[e]:
                    raise SchemaError(
                        f"time {case.time_index}: source {sid} has "
                        f"{vals.size} members, expected {layout.counts[e]}")
                sl = layout.columns(e)
                members[i, sl.start - 1:sl.stop - 1] = vals
            if case.observation is not None:
                obs[i] = case.observation
        times = [c.time_index for c in cases]
        return cls(layout.schema, times, members, obs, **kwargs)

    def __len__(self):
        return self.times.size

    @property
    def n_sources(self) -> int:
        return self.layout.n_sources

    @property
    def has_all_observations(self) -> bool:
        return not np.any(np.isnan(self.observations))

    def require_observations(self):
        if not self.has_all_observations:
            missing = self.times[np.isnan(self.observations)]
            raise ValidationError(
                f"fitting needs observations; missing at times {missing.tolist()}")

    def source_members(self, e: int) -> np.ndarray:
        """Members of the e-th predictor source (schema position, e >= 1)."""
        sl = self.layout.columns(e)
        return self.members[:, sl.start - 1:sl.stop - 1]

    def full_matrix(self) -> np.ndarray:
        """Observation column followed by all members, shape (n, N)."""
        return np.column_stack([self.observations, self.members])

    def case(self, i: int) -> ForecastCase:
        members = {self.layout.source_ids[e]: self.source_members(e)[i].copy()
                   for e in range(1, len(self.schema))}
        y = self.observations[i]
        return ForecastCase(int(self.times[i]), members,
                            None if np.isnan(y) else float(y))

    @property
    def cases(self) -> list[ForecastCase]:
        return [self.case(i) for i in range(len(self))]

    def subset(self, index) -> "Dataset":
        return Dataset(self.schema, self.times[index], self.members[index],
                       self.observations[index], self.variable_kind,
                       self.lead_time, self.location)

    def replace(self, members=None, observations=None, variable_kind=None):
        return Dataset(
            self.schema, self.times,
            self.members if members is None else members,
            self.observations if observations is None else observations,
            self.variable_kind if variable_kind is None else variable_kind,
            self.lead_time, self.location)

    def without_observations(self) -> "Dataset":
        return self.replace(observations=np.full(len(self), np.nan))


def case_to_row(case: ForecastCase, layout: Layout) -> np.ndarray:
    """Flatten the predictor members of one case into a matrix row."""
    row = np.empty(layout.n_cols - 1)
    for e in range(1, len(layout.schema)):
        sid = layout.source_ids[e]
        if sid not in case.members:
            raise SchemaError(f"time {case.time_index}: missing source {sid}")
        vals = np.asarray(case.members[sid], dtype=float).reshape(-1)
        if vals.size != layout.counts[e]:
            raise SchemaError(
                f"time {case.time_index}: source {sid} has {vals.size} "
                f"members, expected {layout.counts[e]}")
        sl = layout.columns(e)
        row[sl.start - 1:sl.stop - 1] = vals
    return row


# ---------------------------------------------------------------------------
# CSV long format
# ---------------------------------------------------------------------------

def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:4]) != CSV_HEADER or len(header) > 5 or (
                len(header) == 5 and header[4] != "lead_time"):
            raise ParseError(
                f"{path}: line 1: expected header {','.join(CSV_HEADER)}"
                f"[,lead_time], got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected "
                                 f"{len(header)} fields, got {len(row)}")
            try:
                t, sid, mid = int(row[0]), int(row[1]), int(row[2])
                value = float(row[3])
                lead = int(row[4]) if len(row) == 5 else None
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if not math.isfinite(value):
                raise ParseError(f"{path}: line {lineno}: non-finite value")
            yield lineno, t, sid, mid, value, lead


def read_lead_times(path) -> list[int]:
    """Distinct lead times present in a CSV (``[]`` without the column)."""
    leads = {r[5] for r in _read_rows(path)}
    return sorted(x for x in leads if x is not None)


def load_dataset(path, schema: Optional[Sequence[SourceSpec]] = None,
                 kind: str = GAUSSIAN, lead_time: Optional[int] = None,
                 location: str = "") -> Dataset:
    """Read a long-format CSV (``time,source_id,member_id,value``).

    Observations use ``source_id=0, member_id=1``.  When ``schema`` is None
    the member counts are inferred from the largest member id of each source.
    An optional ``lead_time`` column allows several lead times per file; use
    ``lead_time`` to select one of them.
    """
    if kind not in VARIABLE_KINDS:
        raise ValidationError(f"unknown variable kind {kind!r}")
    cells: dict[int, dict[int, dict[int, float]]] = {}
    seen_leads = set()
    for lineno, t, sid, mid, value, lead in _read_rows(path):
        seen_leads.add(lead)
        if lead_time is None and len(seen_leads - {None}) > 1:
            raise SchemaError(f"{path}: several lead times present, select one")
        if lead_time is not None and lead is not None and lead != lead_time:
            continue
        if sid < 0 or mid < 1:
            raise ParseError(f"{path}: line {lineno}: bad source/member id")
        if kind == PRECIPITATION and value < 0:
            raise DomainError(
                f"{path}: line {lineno}: negative precipitation {value}")
        per_t = cells.setdefault(t, {}).setdefault(sid, {})
        if mid in per_t:
            raise ParseError(f"{path}: line {lineno}: duplicate entry for "
                             f"time {t}, source {sid}, member {mid}")
        per_t[mid] = value
    if lead_time is None and len(seen_leads - {None}) > 1:
        raise SchemaError(f"{path}: several lead times present, select one")

    if schema is None:
        counts: dict[int, int] = {}
        for per_t in cells.values():
            for sid, mem in per_t.items():
                counts[sid] = max(counts.get(sid, 0), max(mem))
        schema = [SourceSpec(sid, k) for sid, k in sorted(counts.items())]
    layout = Layout(schema)
    declared = set(layout.source_ids)

    times = sorted(cells)
    members = np.empty((len(times), layout.n_cols - 1))
    obs = np.full(len(times), np.nan)
    for i, t in enumerate(times):
        per_t = cells[t]
        extra = set(per_t) - declared
        if extra:
            raise SchemaError(f"time {t}: undeclared source(s) {sorted(extra)}")
        if 0 in per_t:
            if set(per_t[0]) != {1}:
                raise SchemaError(f"time {t}: observation must be member 1")
            obs[i] = per_t[0][1]
        for e in range(1, len(layout.schema)):
            sid = layout.source_ids[e]
            k = int(layout.counts[e])
            got = per_t.get(sid, {})
            if set(got) != set(range(1, k + 1)):
                raise SchemaError(
                    f"time {t}: source {sid} has members {sorted(got)}, "
                    f"expected 1..{k}")
            sl = layout.columns(e)
            members[i, sl.start - 1:sl.stop - 1] = [got[m] for m in range(1, k + 1)]
    return Dataset(layout.schema, times, members, obs, kind,
                   0 if lead_time is None else lead_time, location)


def _write_rows(w, data: Dataset, with_lead_time: bool):
    layout = data.layout
    tail = (data.lead_time,) if with_lead_time else ()
    for i, t in enumerate(data.times):
        t = int(t)
        y = data.observations[i]
        if not np.isnan(y):
            w.writerow((t, 0, 1, repr(float(y))) + tail)
        for e in range(1, len(layout.schema)):
            sid = layout.source_ids[e]
            for k, v in enumerate(data.source_members(e)[i], start=1):
                w.writerow((t, sid, k, repr(float(v))) + tail)


def save_dataset(data: Dataset, path, with_lead_time: bool = False):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + (("lead_time",) if with_lead_time else ()))
        _write_rows(w, data, with_lead_time)


def save_multilead(datasets: Sequence[Dataset], path):
    """Write several lead times (one Dataset each) into one CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + ("lead_time",))
        for data in datasets:
            _write_rows(w, data, True)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise ValidationError(f"{name} must be > 0, got {value}")


@dataclass(frozen=True, eq=False)
class GammaNormalParams:
    """Parameters of the exchangeable Gamma-Normal model.

    ``a`` has one entry per source including the observation (a_0 first);
    ``b`` and ``c`` cover the predictor sources only, since b_0 = c_0 = 1.
    """

    alpha: float
    beta: float
    lam: float
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(-1)
        b = np.array(self.b, dtype=float).reshape(-1)
        c = np.array(self.c, dtype=float).reshape(-1)
        if b.size != c.size or a.size != b.size + 1:
            raise ValidationError(
                f"inconsistent lengths: a={a.size}, b={b.size}, c={c.size}")
        _positive("alpha", self.alpha)
        _positive("beta", self.beta)
        _positive("lambda", self.lam)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValidationError("a and b must be finite")
        if not np.all(np.isfinite(c) & (c > 0)):
            raise ValidationError(f"all c_e must be > 0, got {c.tolist()}")
        for name, arr in (("a", a), ("b", b), ("c", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("alpha", "beta", "lam"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def n_sources(self) -> int:
        return self.b.size

    @property
    def b_full(self) -> np.ndarray:
        return np.concatenate([[1.0], self.b])

    @property
    def c_full(self) -> np.ndarray:
        return np.concatenate([[1.0], self.c])

    @property
    def expected_omega2(self) -> Optional[float]:
        """E[omega^2] = beta / (alpha - 1); None (undefined) when alpha <= 1."""
        return self.beta / (self.alpha - 1) if self.alpha > 1 else None

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.alpha, self.beta, self.lam],
                               self.a, self.b, self.c])

    @classmethod
    def from_vector(cls, vec, n_sources: int) -> "GammaNormalParams":
        vec = np.asarray(vec, dtype=float)
        E = n_sources
        return cls(vec[0], vec[1], vec[2], vec[3:4 + E],
                   vec[4 + E:4 + 2 * E], vec[4 + 2 * E:4 + 3 * E])

    def names(self) -> list[str]:
        E = self.n_sources
        return (["alpha", "beta", "lambda"] + [f"a{e}" for e in range(E + 1)]
                + [f"b{e}" for e in range(1, E + 1)]
                + [f"c{e}" for e in range(1, E + 1)])

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "lambda": self.lam,
                "a": self.a.tolist(), "b": self.b.tolist(),
                "c": self.c.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GammaNormalParams":
        try:
            return cls(d["alpha"], d["beta"], d["lambda"], d["a"], d["b"], d["c"])
        except KeyError as exc:
            raise ValidationError(f"missing parameter field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(str(exc)) from None

    def __eq__(self, other):
        return (isinstance(other, GammaNormalParams)
                and np.array_equal(self.as_vector(), other.as_vector()))

    def __repr__(self):
        return (f"GammaNormalParams(alpha={self.alpha!r}, beta={self.beta!r}, "
                f"lam={self.lam!r}, a={self.a.tolist()}, b={self.b.tolist()}, "
                f"c={self.c.tolist()})")


@dataclass(frozen=True, eq=True)
class TobitParams:
    """Gamma-Normal parameters on the transformed scale plus the transform."""

    base: GammaNormalParams
    gamma_power: float = 1.0
    nu: float = 0.0
    transform_mu: float = 0.0
    transform_sigma: float = 1.0

    def __post_init__(self):
        if not (0 < self.gamma_power <= 1):
            raise ValidationError(
                f"gamma_power must lie in (0, 1], got {self.gamma_power}")
        if self.nu != 0:
            raise ValidationError("only nu = 0 is supported")
        _positive("transform_sigma", self.transform_sigma)
        if not np.isfinite(self.transform_mu):
            raise ValidationError("transform_mu must be finite")

    def to_dict(self) -> dict:
        return {"base": self.base.to_dict(), "gamma_power": float(self.gamma_power),
                "nu": float(self.nu), "transform_mu": float(self.transform_mu),
                "transform_sigma": float(self.transform_sigma)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TobitParams":
        try:
            return cls(GammaNormalParams.from_dict(d["base"]),
                       float(d["gamma_power"]), float(d.get("nu", 0.0)),
                       float(d["transform_mu"]), float(d["transform_sigma"]))
        except KeyError as exc:
            raise ValidationError(f"missing parameter field {exc}") from None


def params_to_json(params) -> str:
    if isinstance(params, TobitParams):
        payload = {"model": "tobit", **params.to_dict()}
    elif isinstance(params, GammaNormalParams):
        payload = {"model": "gamma_normal", **params.to_dict()}
    elif hasattr(params, "to_dict"):
        payload = params.to_dict()
    else:
        raise TypeError(f"cannot serialise {type(params).__name__}")
    # json writes floats with repr(), which round-trips bit-exactly
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def params_from_json(text: str):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid parameter JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ParseError("parameter JSON must be an object")
    model = d.get("model", "gamma_normal")
    if model == "tobit":
        return TobitParams.from_dict(d)
    if model == "gamma_normal":
        return GammaNormalParams.from_dict(d)
    if model == "emos":
        from .emos import EmosParams
        return EmosParams.from_dict(d)
    raise ValidationError(f"unknown model {model!r}")


def save_params(params, path):
    Path(path).write_text(params_to_json(params), encoding="utf-8")


def load_params(path):
    return params_from_json(Path(path).read_text(encoding="utf-8"))
