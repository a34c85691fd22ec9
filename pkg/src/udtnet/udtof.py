"""UDT operation functions: the data operations run by the data management module.

Every function takes and returns immutable :class:`Dataset` values. Each
result carries ``cost``, the data-operation units spent producing it (rows
read plus rows written), so callers can account for the resources that data
handling consumes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import CapacityError, ParameterError, RankError, ValidationError
from .qoe import fit_arrays, predict_qoe
from .udt_store import TwoTierStore

PROVENANCES = ("raw", "cleaned", "reduced", "augmented", "generated")
CLEAN_RULES = ("drop_nonfinite", "clamp_y_to_unit", "dedupe_exact")
SHAPLEY_MAX_ROWS = 12


class Row(NamedTuple):
    user_id: str
    x: float
    y: Optional[float]


@dataclass(frozen=True)
class Dataset:
    rows: tuple[Row, ...] = ()
    provenance: str = "raw"
    cost: int = 0

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "rows", tuple(Row(str(u), float(x), None if y is None else float(y))
                                               for u, x, y in self.rows))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def users(self) -> list[str]:
        return list(dict.fromkeys(r.user_id for r in self.rows))

    def x(self) -> np.ndarray:
        return np.array([r.x for r in self.rows], dtype=float)

    def y(self) -> np.ndarray:
        return np.array([np.nan if r.y is None else r.y for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user_id", "frequency_hz", "vchr", "provenance"])
        for r in self.rows:
            w.writerow([r.user_id, repr(r.x), "" if r.y is None else repr(r.y), self.provenance])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        reader = csv.reader(io.StringIO(text))
        if next(reader, None) != ["user_id", "frequency_hz", "vchr", "provenance"]:
            raise ValidationError("dataset header must be user_id,frequency_hz,vchr,provenance")
        rows, prov = [], "raw"
        for rec in reader:
            if not rec:
                continue
            rows.append(Row(rec[0], float(rec[1]), float(rec[2]) if rec[2] else None))
            prov = rec[3]
        return cls(tuple(rows), prov)


def prepare(store: TwoTierStore, attributes: Sequence[str] = ("collection_frequency", "mean_vchr")) -> Dataset:
    """Project store records into raw (user, decision, QoE) rows.

    ``attributes`` names the decision attribute and the QoE attribute, in that
    order. Records lacking either value are skipped.
    """
    if len(attributes) != 2:
        raise ValidationError("prepare needs exactly (decision attribute, QoE attribute)")
    for a in attributes:
        if a not in store.schema:
            raise ValidationError(f"unknown attribute {a!r}")
        if store.schema[a].value_kind != "scalar":
            raise ValidationError(f"attribute {a!r} is not scalar")
    x_attr, y_attr = attributes
    records = store.query()
    rows = tuple(Row(r.user_id, r.values[x_attr], r.values[y_attr])
                 for r in records if x_attr in r.values and y_attr in r.values)
    return Dataset(rows, "raw", cost=len(records) + len(rows))


def clean(ds: Dataset, rules: Iterable[str] = CLEAN_RULES) -> Dataset:
    """Apply cleaning rules in the fixed order drop -> clamp -> dedupe.

    ``drop_nonfinite`` also removes rows with a missing VCHR or a non-positive
    frequency.
    """
    rules = set(rules)
    unknown = rules - set(CLEAN_RULES)
    if unknown:
        raise ValidationError(f"unknown cleaning rules {sorted(unknown)}")
    rows = list(ds.rows)
    if "drop_nonfinite" in rules:
        rows = [r for r in rows if r.y is not None and math.isfinite(r.x) and math.isfinite(r.y) and r.x > 0]
    if "clamp_y_to_unit" in rules:
        rows = [r if r.y is None else r._replace(y=min(max(r.y, 0.0), 1.0)) for r in rows]
    if "dedupe_exact" in rules:
        rows = list(dict.fromkeys(rows))
    return Dataset(tuple(rows), "cleaned", cost=len(ds) + len(rows))


def reduce(ds: Dataset, target_rows: Optional[int] = None, strategy: str = "uniform_subsample",
           seed: int = 0) -> Dataset:
    if strategy == "uniform_subsample":
        if target_rows is None or target_rows < 1:
            raise ParameterError("uniform_subsample needs target_rows >= 1")
        if target_rows >= len(ds):
            rows = ds.rows
        else:
            keep = np.sort(np.random.default_rng(seed).choice(len(ds), size=target_rows, replace=False))
            rows = tuple(ds.rows[i] for i in keep)
    elif strategy == "per_frequency_mean":
        groups: dict[tuple[str, float], list[float]] = {}
        for r in ds.rows:
            groups.setdefault((r.user_id, r.x), []).append(r.y)
        rows = []
        for (u, x), ys in groups.items():
            if any(y is None for y in ys):
                rows.append(Row(u, x, None))
            else:
                rows.append(Row(u, x, math.fsum(ys) / len(ys)))
        rows = tuple(rows)
    else:
        raise ParameterError(f"unknown reduction strategy {strategy!r}")
    return Dataset(rows, "reduced", cost=len(ds) + len(rows))


def augment(ds: Dataset, jitter_y_sigma: float = 0.01, replicate_k: int = 1, seed: int = 0) -> Dataset:
    """Keep each row and follow it with ``replicate_k`` y-jittered copies clamped to [0, 1]."""
    if jitter_y_sigma < 0:
        raise ParameterError("jitter_y_sigma must be non-negative")
    if replicate_k < 1:
        raise ParameterError("replicate_k must be at least 1")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((len(ds), replicate_k)) * jitter_y_sigma
    rows = []
    for r, eps in zip(ds.rows, noise):
        rows.append(r)
        for e in eps:
            rows.append(r if r.y is None else r._replace(y=min(max(r.y + float(e), 0.0), 1.0)))
    return Dataset(tuple(rows), "augmented", cost=len(ds) + len(rows))


def slice_by_user(ds: Dataset) -> dict[str, Dataset]:
    """Partition rows per user, preserving row order and provenance."""
    parts: dict[str, list[Row]] = {}
    for r in ds.rows:
        parts.setdefault(r.user_id, []).append(r)
    return {u: Dataset(tuple(rs), ds.provenance, cost=2 * len(rs)) for u, rs in parts.items()}


def generate_eval(ds: Dataset, mode: str = "in_distribution", n: Optional[int] = None, seed: int = 0,
                  simulate: Optional[Callable[[str, float], float]] = None) -> Dataset:
    """Evaluation data for a trained model.

    ``in_distribution`` bootstraps rows (same size as the input by default).
    ``out_of_distribution`` draws frequencies from ``(max_x, 2 * max_x]``,
    assigns users round-robin, and labels them with ``simulate(user, x)`` when
    a simulator is supplied; otherwise VCHR stays empty.
    """
    if not ds.rows:
        raise ParameterError("cannot generate evaluation data from an empty dataset")
    n = len(ds) if n is None else int(n)
    if n < 1:
        raise ParameterError("n must be at least 1")
    rng = np.random.default_rng(seed)
    if mode == "in_distribution":
        idx = rng.integers(0, len(ds), size=n)
        rows = tuple(ds.rows[i] for i in idx)
    elif mode == "out_of_distribution":
        max_x = max(r.x for r in ds.rows)
        xs = max_x * (1.0 + (1.0 - rng.random(n)))
        users = ds.users
        rows = tuple(
            Row(users[i % len(users)], float(x), None if simulate is None else float(simulate(users[i % len(users)], float(x))))
            for i, x in enumerate(xs)
        )
    else:
        raise ParameterError(f"unknown generation mode {mode!r}")
    return Dataset(rows, "generated", cost=len(ds) + len(rows))


# -- valuation ----------------------------------------------------------------


class CubicFitUtility:
    """Negative RMSE, on ``eval_ds``, of a cubic fitted to a subset of rows.

    Subsets that cannot support a cubic (fewer than 4 distinct frequencies)
    score the empty-set utility: the RMSE of predicting zero everywhere.
    """

    def __init__(self, eval_ds: Dataset):
        self.eval_x = eval_ds.x()
        self.eval_y = eval_ds.y()
        self.empty = -math.sqrt(float(np.mean(self.eval_y**2))) if len(eval_ds) else 0.0

    def __call__(self, subset: Dataset) -> float:
        if len(np.unique(subset.x())) < 4:
            return self.empty
        try:
            model = fit_arrays(subset.x(), subset.y())
        except RankError:
            return self.empty
        resid = self.eval_y - predict_qoe(model, self.eval_x)
        return -math.sqrt(float(np.mean(resid**2)))


@dataclass(frozen=True)
class ValuationReport:
    values: tuple[float, ...]
    method: str
    utility_full: float
    utility_empty: float

    def to_csv(self) -> str:
        lines = ["row_index,value"] + [f"{i},{v!r}" for i, v in enumerate(self.values)]
        return "\n".join(lines) + "\n"


def _subset(ds: Dataset, idx: Iterable[int]) -> Dataset:
    return Dataset(tuple(ds.rows[i] for i in idx), ds.provenance)


def value_data(ds: Dataset, utility: Optional[Callable[[Dataset], float]] = None,
               method: str = "loo") -> ValuationReport:
    """Per-row contribution to ``utility`` by leave-one-out or exact Shapley value."""
    utility = utility or CubicFitUtility(ds)
    n = len(ds)
    full = float(utility(ds))
    empty = float(utility(_subset(ds, ())))
    if method == "loo":
        values = tuple(full - float(utility(_subset(ds, [j for j in range(n) if j != i]))) for i in range(n))
    elif method == "shapley":
        if n > SHAPLEY_MAX_ROWS:
            raise CapacityError(f"exact Shapley valuation is capped at {SHAPLEY_MAX_ROWS} rows, got {n}")
        v = {}
        for size in range(n + 1):
            for s in combinations(range(n), size):
                v[s] = float(utility(_subset(ds, s)))
        weight = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
        phi = []
        for i in range(n):
            total = []
            others = [j for j in range(n) if j != i]
            for size in range(n):
                for s in combinations(others, size):
                    with_i = tuple(sorted(s + (i,)))
                    total.append(weight[size] * (v[with_i] - v[s]))
            phi.append(math.fsum(total))
        values = tuple(phi)
    else:
        raise ParameterError(f"unknown valuation method {method!r}")
    return ValuationReport(values, method, full, empty)


# -- drift ----------------------------------------------------------------------


@dataclass(frozen=True)
class DriftReport:
    statistic: float
    threshold: float
    drifted: bool
    n_ref: int
    n_recent: int

    def to_text(self) -> str:
        return (f"statistic={self.statistic!r} threshold={self.threshold!r} "
                f"drifted={str(self.drifted).lower()} n_ref={self.n_ref} n_recent={self.n_recent}\n")


KS_C_ALPHA = {0.10: 1.224, 0.05: 1.358, 0.025: 1.48, 0.01: 1.628, 0.005: 1.731, 0.001: 1.949}
MIN_DRIFT_SAMPLES = 20


def ks_critical_value(alpha: float) -> float:
    """Large-sample coefficient c(alpha) = sqrt(-ln(alpha / 2) / 2), tabulated values preferred."""
    if alpha in KS_C_ALPHA:
        return KS_C_ALPHA[alpha]
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    return math.sqrt(-math.log(alpha / 2.0) / 2.0)


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov D = sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def detect_drift(reference, recent, threshold: Optional[float] = None, alpha: float = 0.05) -> DriftReport:
    """Flag a distribution shift between a reference window and a recent window."""
    n, m = len(reference), len(recent)
    if n < MIN_DRIFT_SAMPLES or m < MIN_DRIFT_SAMPLES:
        raise ParameterError(f"drift detection needs at least {MIN_DRIFT_SAMPLES} samples per window")
    d = ks_statistic(reference, recent)
    if threshold is None:
        threshold = ks_critical_value(alpha) * math.sqrt((n + m) / (n * m))
    return DriftReport(d, float(threshold), d > threshold, n, m)
