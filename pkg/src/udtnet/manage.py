"""Network management decisions driven by the QoE models.

Which users get a digital twin (and therefore a personal QoE model), how
well the resulting model assignment describes the cohort, and how a summed
pose-collection budget is split between users.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import CapacityError, ParameterError, StateError
from .qoe import QoEModel, modeling_error, predict_qoe

log = logging.getLogger(__name__)

STRATEGIES = ("random", "min_modeling_error")


@dataclass(frozen=True)
class SelectionResult:
    strategy: str
    k: int
    selected: frozenset[str]
    seed: Optional[int] = None
    clamped: bool = False


def select_users(errors: Mapping[str, float], k: int, strategy: str = "min_modeling_error",
                 seed: Optional[int] = None) -> SelectionResult:
    """Pick ``k`` users for UDT establishment.

    ``min_modeling_error`` takes the users the agnostic model describes worst
    (largest RMSE, ties by ascending user id); ``random`` samples without
    replacement from a generator seeded with ``seed``.
    """
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown selection strategy {strategy!r}")
    if k < 0:
        raise ParameterError("k must be non-negative")
    if strategy == "min_modeling_error" and not errors:
        raise ParameterError("min_modeling_error selection needs per-user errors")
    cohort = sorted(errors)
    clamped = k > len(cohort)
    if clamped:
        log.warning("k=%d exceeds cohort size %d; clamping", k, len(cohort))
        k = len(cohort)
    if strategy == "min_modeling_error":
        ranked = sorted(cohort, key=lambda u: (-errors[u], u))
        chosen = ranked[:k]
    else:
        rng = np.random.default_rng(seed)
        chosen = [cohort[i] for i in rng.choice(len(cohort), size=k, replace=False)]
    return SelectionResult(strategy, k, frozenset(chosen), seed, clamped)


def assign_models(selection: SelectionResult, per_user_models: Mapping[str, QoEModel],
                  agnostic_model: QoEModel, cohort: Optional[Sequence[str]] = None) -> dict[str, QoEModel]:
    """Per-user model for selected users, the agnostic model for everyone else.

    ``cohort`` defaults to the users that have a per-user model.
    """
    cohort = sorted(per_user_models) if cohort is None else list(cohort)
    missing = sorted(u for u in selection.selected if u not in per_user_models)
    if missing:
        raise StateError(f"no per-user model for selected users {missing}")
    return {u: (per_user_models[u] if u in selection.selected else agnostic_model) for u in cohort}


def average_error(assignment: Mapping[str, QoEModel], slices: Mapping) -> float:
    """Mean over users of the RMSE of each user's assigned model on their own samples."""
    missing = sorted(u for u in assignment if u not in slices or not slices[u].rows)
    if missing:
        raise ParameterError(f"no samples for users {missing}")
    if not assignment:
        raise ParameterError("empty assignment")
    return math.fsum(modeling_error(m, slices[u]).rmse for u, m in assignment.items()) / len(assignment)


def error_curve(per_user_rmse: Mapping[str, float], agnostic_rmse: Mapping[str, float],
                selection: SelectionResult) -> float:
    """Average error for a selection given precomputed per-user and agnostic RMSEs."""
    users = sorted(agnostic_rmse)
    vals = [per_user_rmse[u] if u in selection.selected else agnostic_rmse[u] for u in users]
    return math.fsum(vals) / len(vals)


@dataclass(frozen=True)
class Allocation:
    frequencies: dict[str, float]
    total_cost: float
    budget: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user_id", "frequency_hz"])
        for u in sorted(self.frequencies):
            w.writerow([u, repr(float(self.frequencies[u]))])
        return buf.getvalue()


def allocate_frequencies(assignment: Mapping[str, QoEModel], grid: Sequence[float],
                         budget: float) -> Allocation:
    """Greedy marginal-gain split of a summed collection-rate budget.

    Everybody starts at ``grid[0]``. Each round grants the affordable one-step
    upgrade with the best predicted (clamped) VCHR gain per Hz, ties to the
    smallest user id, until no affordable upgrade improves QoE.
    """
    grid = [float(g) for g in grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ParameterError("grid must be non-empty and strictly ascending")
    users = sorted(assignment)
    cost = len(users) * grid[0]
    if cost > budget + 1e-9:
        raise CapacityError(f"budget {budget} cannot give {len(users)} users the minimum {grid[0]} Hz")
    level = {u: 0 for u in users}
    qoe = {u: [float(predict_qoe(assignment[u], g, clamp=True)) for g in grid] for u in users}
    while True:
        best, best_gain = None, 0.0
        for u in users:
            i = level[u]
            if i + 1 >= len(grid):
                continue
            step = grid[i + 1] - grid[i]
            if cost + step > budget + 1e-9:
                continue
            gain = (qoe[u][i + 1] - qoe[u][i]) / step
            if gain > best_gain:
                best, best_gain = u, gain
        if best is None:
            break
        cost += grid[level[best] + 1] - grid[level[best]]
        level[best] += 1
    freqs = {u: grid[level[u]] for u in users}
    return Allocation(freqs, math.fsum(freqs.values()), float(budget))


def fig4b_rows_to_csv(rows: Sequence[tuple[int, str, Optional[int], float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "strategy", "seed", "avg_rmse"])
    for k, strategy, seed, avg in rows:
        w.writerow([k, strategy, "" if seed is None else seed, repr(float(avg))])
    return buf.getvalue()
