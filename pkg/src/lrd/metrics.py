"""Continual-learning summaries over an accuracy matrix and the three
closed-form bound evaluators (all logs natural, hidden constants set to 1)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import ContractError


def _as_matrix(R) -> list[list[float]]:
    R = [list(map(float, row)) for row in R]
    T = len(R)
    for i, row in enumerate(R):
        if len(row) < i + 1:
            raise ContractError(f"accuracy matrix row {i} has {len(row)} entries, needs {i + 1}")
    if T == 0:
        raise ContractError("empty accuracy matrix")
    return R


def forgetting(R) -> float:
    """Mean over earlier tasks of the clamped relative drop from learn time to the end."""
    R = _as_matrix(R)
    T = len(R)
    vals = []
    for j in range(T - 1):
        a0 = R[j][j]
        if a0 == 0:
            continue
        vals.append(max(0.0, (a0 - R[T - 1][j]) / a0))
    return float(np.mean(vals)) if vals else 0.0


def bwt(R) -> float:
    R = _as_matrix(R)
    T = len(R)
    if T < 2:
        raise ContractError("BWT needs at least two tasks")
    return float(np.mean([R[T - 1][j] - R[j][j] for j in range(T - 1)]))


def fwt(R, ref) -> float:
    """Mean over j > 0 of accuracy on task j before training it minus the reference.

    Needs R[j-1][j], i.e. a full-width matrix.
    """
    T = len(R)
    if T < 2:
        raise ContractError("FWT needs at least two tasks")
    vals = []
    for j in range(1, T):
        if len(R[j - 1]) <= j:
            raise ContractError(f"FWT needs R[{j - 1}][{j}] (pre-training accuracy on task {j})")
        vals.append(float(R[j - 1][j]) - float(ref[j]))
    return float(np.mean(vals))


def localization_drift(iou_table) -> tuple[float, list[int]]:
    """Mean clamped relative drop of matched IoU; returns (drift, skipped tasks).

    ``iou_table[i][j]`` is the mean matched IoU on task j after task i, or
    None when nothing matched.
    """
    T = len(iou_table)
    vals, skipped = [], []
    for j in range(T - 1):
        a, b = iou_table[j][j], iou_table[T - 1][j]
        if a is None or b is None or a == 0:
            skipped.append(j)
            continue
        vals.append(max(0.0, (a - b) / a))
    return (float(np.mean(vals)) if vals else 0.0), skipped


def average_accuracy(R) -> float:
    """Mean of the final row over all tasks."""
    R = _as_matrix(R)
    return float(np.mean(R[-1][: len(R)]))


@dataclass
class BoundInputs:
    eps: float = 0.1
    T: int = 5
    M: int = 455
    eta: float = 1e-4
    r: float = 0.125
    rho: float = 0.5
    H: int = 8
    W: int = 8

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ContractError("eps must lie in [0, 1]")
        if not 0.0 < self.r <= 1.0:
            raise ContractError("r must lie in (0, 1]")
        for name in ("T", "M", "eta", "rho", "H", "W"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")


def forgetting_bound(b: BoundInputs) -> float:
    return b.eps * math.sqrt(b.T) + 1.0 / math.sqrt(b.M) + b.eta * math.log(b.T)


def convergence_iters(b: BoundInputs) -> float:
    if b.eps == 0:
        return math.inf
    return 1.0 / (b.eta * b.r * b.rho * b.eps)


def iou_drift_bound(b: BoundInputs) -> float:
    return math.sqrt(1.0 - b.r) * math.log(b.T) / math.sqrt(b.H * b.W)


def bound_table(b: BoundInputs) -> dict:
    return {
        **asdict(b),
        "forgetting_bound": forgetting_bound(b),
        "convergence_iters": convergence_iters(b),
        "iou_drift_bound": iou_drift_bound(b),
    }


def estimate_eps(mse: float, feature_var: float) -> float:
    """1 - explained variance of a reconstruction, clamped to [0, 1]."""
    if feature_var <= 0:
        return 1.0
    return float(min(max(mse / feature_var, 0.0), 1.0))


def summarize(R, ref=None, iou_table=None) -> dict:
    out = {"final_map": average_accuracy(R), "forgetting": forgetting(R)}
    if len(R) >= 2:
        out["bwt"] = bwt(R)
        if ref is not None and all(len(R[j - 1]) > j for j in range(1, len(R))):
            out["fwt"] = fwt(R, ref)
    if iou_table is not None:
        out["loc_drift"], out["drift_skipped"] = localization_drift(iou_table)
    return out


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
