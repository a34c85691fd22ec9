"""Cubic QoE models: pose collection frequency (Hz) -> VCHR.

Frequencies are mapped to ``xn = (x - x_min) / (x_max - x_min)`` before
fitting so the Vandermonde columns stay well scaled; the least-squares problem
is solved through a QR factorization of the 4-column design matrix.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ParameterError, RankError, ValidationError

DEGREE = 3


@dataclass(frozen=True)
class QoEModel:
    coefficients: tuple[float, float, float, float]
    x_min: float
    x_max: float
    scope: str = "agnostic"
    user_id: Optional[str] = None
    fit_rmse: float = 0.0

    def __post_init__(self):
        c = tuple(float(v) for v in self.coefficients)
        if len(c) != DEGREE + 1 or not all(math.isfinite(v) for v in c):
            raise ValidationError(f"need {DEGREE + 1} finite coefficients, got {self.coefficients!r}")
        if not self.x_max > self.x_min:
            raise ValidationError("x_max must exceed x_min")
        if self.scope not in ("agnostic", "per_user"):
            raise ValidationError(f"unknown scope {self.scope!r}")
        if self.scope == "per_user" and self.user_id is None:
            raise ValidationError("per_user models need a user_id")
        object.__setattr__(self, "coefficients", c)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.x_min) / (self.x_max - self.x_min)

    def __call__(self, x, clamp: bool = False):
        return predict_qoe(self, x, clamp=clamp)


@dataclass(frozen=True)
class FitReport:
    rmse: float
    n_samples: int
    residuals: tuple[float, ...] = field(repr=False, default=())


def _xy(ds) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([r.x for r in ds.rows], dtype=float)
    y = np.array([np.nan if r.y is None else r.y for r in ds.rows], dtype=float)
    return x, y


def design_matrix(xn) -> np.ndarray:
    xn = np.asarray(xn, dtype=float)
    return np.vander(xn, DEGREE + 1, increasing=True)


def lstsq_qr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Least-squares solution of ``a @ c = b`` via reduced QR."""
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= 1e-12 * max(diag.max(), 1.0):
        raise RankError("design matrix is rank deficient")
    return solve_triangular(r, q.T @ b)


def fit_arrays(x, y, scope: str = "agnostic", user_id: Optional[str] = None,
               x_range: Optional[tuple[float, float]] = None) -> QoEModel:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("x and y must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite sample")
    n_distinct = len(np.unique(x))
    if n_distinct < DEGREE + 1:
        raise RankError(f"cubic fit needs at least {DEGREE + 1} distinct frequencies, got {n_distinct}")
    x_min, x_max = x_range if x_range is not None else (float(x.min()), float(x.max()))
    if not x_max > x_min:
        raise RankError("degenerate frequency normalization (all x equal)")
    xn = (x - x_min) / (x_max - x_min)
    coef = lstsq_qr(design_matrix(xn), y)
    resid = y - design_matrix(xn) @ coef
    rmse = math.sqrt(float(np.mean(resid**2)))
    return QoEModel(tuple(coef), float(x_min), float(x_max), scope=scope, user_id=user_id, fit_rmse=rmse)


def fit_qoe(ds, scope: str = "agnostic", user_id: Optional[str] = None) -> QoEModel:
    """Least-squares cubic on the (frequency, VCHR) rows of a dataset.

    ``scope="per_user"`` records ``user_id`` (taken from the rows when they all
    belong to one user).
    """
    if scope == "per_user" and user_id is None:
        users = {r.user_id for r in ds.rows}
        if len(users) != 1:
            raise ValidationError("per_user fit needs rows of exactly one user or an explicit user_id")
        user_id = users.pop()
    x, y = _xy(ds)
    return fit_arrays(x, y, scope=scope, user_id=user_id if scope == "per_user" else None)


def fit_agnostic(full) -> QoEModel:
    """One cubic over the pooled samples of all users."""
    return fit_qoe(full, scope="agnostic")


def predict_qoe(model: QoEModel, x, clamp: bool = False):
    xn = model.normalize(x)
    c0, c1, c2, c3 = model.coefficients
    y = c0 + xn * (c1 + xn * (c2 + xn * c3))
    if clamp:
        y = np.clip(y, 0.0, 1.0)
    return float(y) if np.ndim(y) == 0 else y


def modeling_error(model: QoEModel, ds) -> FitReport:
    """RMSE of unclamped predictions against the dataset rows."""
    if not ds.rows:
        raise ParameterError("modeling error needs a non-empty dataset")
    x, y = _xy(ds)
    if not np.all(np.isfinite(y)):
        raise ParameterError("dataset rows without a VCHR value cannot be scored")
    resid = y - predict_qoe(model, x)
    resid = np.atleast_1d(resid)
    return FitReport(
        rmse=math.sqrt(float(np.mean(resid**2))),
        n_samples=len(resid),
        residuals=tuple(float(r) for r in resid),
    )


MODEL_HEADER = ("scope", "user_id", "c0", "c1", "c2", "c3", "x_min", "x_max", "fit_rmse")


def models_to_csv(models: Sequence[QoEModel]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MODEL_HEADER)
    for m in models:
        w.writerow([m.scope, m.user_id or "", *(repr(c) for c in m.coefficients),
                    repr(m.x_min), repr(m.x_max), repr(m.fit_rmse)])
    return buf.getvalue()


def models_from_csv(text: str) -> list[QoEModel]:
    reader = csv.reader(io.StringIO(text))
    if tuple(next(reader, ())) != MODEL_HEADER:
        raise ValidationError(f"model table header must be {','.join(MODEL_HEADER)}")
    out = []
    for rec in reader:
        if not rec:
            continue
        scope, uid, *nums = rec
        vals = [float(v) for v in nums]
        out.append(QoEModel(tuple(vals[:4]), vals[4], vals[5], scope=scope,
                            user_id=uid or None, fit_rmse=vals[6]))
    return out
