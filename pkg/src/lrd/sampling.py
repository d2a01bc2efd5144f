"""Exemplar selection: farthest-point sampling in IoU space with scale
stratification and grid-coverage repair, plus random / reservoir / herding
baselines.

All tie-breaking is by lowest candidate position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import BBox, ContractError, GridCell, ScaleBucket, grid_cell, iou_matrix, scale_bucket


@dataclass(frozen=True)
class Candidate:
    index: int  # sample index in the task's training list
    bbox: BBox
    cls: int
    grid: GridCell
    scale: ScaleBucket
    obj: int = 0  # object position inside the sample

    @classmethod
    def make(cls, index: int, bbox: BBox, label: int, G: int = 3, obj: int = 0) -> "Candidate":
        return cls(index, bbox, label, grid_cell(bbox, G), scale_bucket(bbox), obj)


@dataclass
class SamplingConfig:
    k: int = 50
    grid: int = 3
    proportions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    method: str = "spatial"  # spatial | random | reservoir | herding

    def __post_init__(self):
        self.proportions = tuple(float(p) for p in self.proportions)
        if len(self.proportions) != 3 or any(p < 0 for p in self.proportions):
            raise ContractError("need three non-negative scale proportions")
        if abs(sum(self.proportions) - 1.0) > 1e-6:
            raise ContractError(f"scale proportions must sum to 1, got {sum(self.proportions)}")
        if self.k < 1:
            raise ContractError("k must be positive")
        if self.method not in ("spatial", "random", "reservoir", "herding"):
            raise ContractError(f"unknown sampling method {self.method!r}")


def distance_matrix(cands: list[Candidate]) -> np.ndarray:
    boxes = np.array([c.bbox.as_tuple() for c in cands])
    return 1.0 - iou_matrix(boxes, boxes)


@dataclass
class FPSResult:
    order: list[int]
    distances: list[float] = field(default_factory=list)  # min distance at selection time (inf for the first)


def fps_from_matrix(D: np.ndarray, k: int, first: int) -> FPSResult:
    n = len(D)
    mind = D[first].astype(np.float64).copy()
    chosen = np.zeros(n, bool)
    chosen[first] = True
    order, dists = [first], [math.inf]
    for _ in range(k - 1):
        score = np.where(chosen, -np.inf, mind)
        j = int(np.argmax(score))
        order.append(j)
        dists.append(float(mind[j]))
        chosen[j] = True
        mind = np.minimum(mind, D[j])
    return FPSResult(order, dists)


def fps_iou(candidates: list[Candidate], k: int, seed: int = 0, first: int | None = None, trace: bool = False):
    """Greedy max-min selection under d = 1 - IoU.

    The first pick is uniform with ``seed`` unless ``first`` is given.
    Returns positions into ``candidates`` in selection order (and the
    per-pick distances when ``trace`` is set).
    """
    n = len(candidates)
    if n == 0:
        raise ContractError("fps_iou needs at least one candidate")
    if k > n:
        raise ContractError(f"k={k} exceeds {n} candidates")
    if k <= 0:
        return FPSResult([], []) if trace else []
    if first is None:
        first = int(np.random.default_rng(seed).integers(n))
    res = fps_from_matrix(distance_matrix(candidates), k, first)
    return res if trace else res.order


def _min_dist_to_others(D: np.ndarray, sel: list[int]) -> np.ndarray:
    sub = D[np.ix_(sel, sel)].copy()
    np.fill_diagonal(sub, np.inf)
    return sub.min(axis=1)


def enforce_grid_coverage(
    selected: list[int], candidates: list[Candidate], G: int | None = None, D: np.ndarray | None = None,
    prefer_same_scale: bool = False,
) -> list[int]:
    """Swap selections so every non-empty grid cell contributes one exemplar.

    For each unrepresented cell (row-major order) the selected item with the
    smallest min-distance to the rest of the selection, among items whose
    cell is represented more than once, is replaced by that cell's candidate
    farthest from the remaining selection.
    """
    sel = list(selected)
    if not sel:
        return sel
    cells = [c.grid if G is None else grid_cell(c.bbox, G) for c in candidates]
    nonempty = sorted(set(cells), key=lambda g: (g.row, g.col))
    if len(sel) < len(nonempty):
        return sel
    if D is None:
        D = distance_matrix(candidates)
    for cell in nonempty:
        counts: dict[GridCell, int] = {}
        for i in sel:
            counts[cells[i]] = counts.get(cells[i], 0) + 1
        if cell in counts:
            continue
        if len(sel) > 1:
            md = _min_dist_to_others(D, sel)
        else:
            md = np.zeros(1)
        removable = [p for p, i in enumerate(sel) if counts[cells[i]] > 1]
        if not removable:
            break
        p_out = min(removable, key=lambda p: (md[p], p))
        out_item = sel[p_out]
        rest = sel[:p_out] + sel[p_out + 1 :]
        pool = [i for i in range(len(candidates)) if cells[i] == cell and i not in sel]
        if prefer_same_scale:
            same = [i for i in pool if candidates[i].scale == candidates[out_item].scale]
            pool = same or pool
        if rest:
            far = D[np.ix_(pool, rest)].min(axis=1)
        else:
            far = np.zeros(len(pool))
        best = pool[int(np.argmax(far))]
        sel[p_out] = best
    return sel


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def stratified_quotas(k: int, proportions, populations) -> list[int]:
    """Per-bucket quotas: round(k * p), remainder to the most populous bucket.

    Empty buckets hand their share to the others in proportion to p, and no
    bucket is asked for more than it holds.
    """
    p = np.asarray(proportions, dtype=np.float64)
    pop = np.asarray(populations, dtype=np.int64)
    k = int(min(k, pop.sum()))
    if k == 0:
        return [0] * len(p)
    live = pop > 0
    w = np.where(live, p, 0.0)
    if w.sum() == 0:
        w = live.astype(np.float64)
    w = w / w.sum()
    q = np.array([_round_half_up(k * wi) for wi in w])
    biggest = int(np.argmax(pop))
    q[biggest] += k - q.sum()
    q = np.clip(q, 0, pop)
    # spill anything clipped to the buckets with the most room left
    while q.sum() < k:
        q[int(np.argmax(pop - q))] += 1
    while q.sum() > k:
        q[int(np.argmax(q))] -= 1
    return [int(v) for v in q]


def scale_stratified_select(candidates: list[Candidate], config: SamplingConfig, seed: int = 0) -> list[int]:
    buckets = [[i for i, c in enumerate(candidates) if c.scale == b] for b in ScaleBucket]
    quotas = stratified_quotas(config.k, config.proportions, [len(b) for b in buckets])
    out = []
    for b, (members, q) in enumerate(zip(buckets, quotas)):
        if q == 0:
            continue
        sub = [candidates[i] for i in members]
        picks = fps_iou(sub, q, seed=seed * 7919 + b)
        out.extend(members[i] for i in picks)
    return out


def random_select(candidates, k: int, seed: int = 0) -> list[int]:
    n = len(candidates)
    if n == 0:
        raise ContractError("random_select needs candidates")
    if k > n:
        raise ContractError(f"k={k} exceeds {n} candidates")
    return [int(i) for i in np.random.default_rng(seed).choice(n, size=k, replace=False)]


def reservoir_select(stream, k: int, seed: int = 0) -> list:
    """Algorithm R over an iterable; returns the kept items."""
    rng = np.random.default_rng(seed)
    res = []
    for i, item in enumerate(stream):
        if i < k:
            res.append(item)
        else:
            j = int(rng.integers(i + 1))
            if j < k:
                res[j] = item
    return res


def herding_select(features: np.ndarray, k: int) -> list[int]:
    """Greedy herding: keep the running exemplar mean close to the class mean."""
    X = np.asarray(features, dtype=np.float64)
    n = len(X)
    if n == 0:
        raise ContractError("herding needs features")
    if k > n:
        raise ContractError(f"k={k} exceeds {n} candidates")
    mu = X.mean(axis=0)
    acc = np.zeros_like(mu)
    chosen = np.zeros(n, bool)
    out = []
    for i in range(k):
        dist = np.linalg.norm(mu[None] - (acc[None] + X) / (i + 1), axis=1)
        dist[chosen] = np.inf
        j = int(np.argmin(dist))
        out.append(j)
        chosen[j] = True
        acc += X[j]
    return out


def build_candidates(samples, G: int = 3) -> list[Candidate]:
    out = []
    for i, s in enumerate(samples):
        for j, (b, y) in enumerate(zip(s.gt.boxes, s.gt.labels)):
            out.append(Candidate.make(i, b, y, G, j))
    return out


def select_exemplars(
    samples, config: SamplingConfig, seed: int = 0, features: np.ndarray | None = None, trace: list | None = None
) -> list[Candidate]:
    """Per-class exemplar set for one task.

    ``features`` (one row per candidate, in :func:`build_candidates` order)
    is only needed by the herding baseline.
    """
    cands = build_candidates(samples, config.grid)
    if not cands:
        raise ContractError("task has no labelled objects")
    chosen: list[Candidate] = []
    for c in sorted({x.cls for x in cands}):
        pos = [i for i, x in enumerate(cands) if x.cls == c]
        sub = [cands[i] for i in pos]
        k = min(config.k, len(sub))
        cseed = seed * 1000 + c
        if config.method == "spatial":
            sel = scale_stratified_select(sub, SamplingConfig(k, config.grid, config.proportions), seed=cseed)
            D = distance_matrix(sub)
            sel = enforce_grid_coverage(sel, sub, D=D, prefer_same_scale=True)
            if trace is not None:
                md = _min_dist_to_others(D, sel) if len(sel) > 1 else np.zeros(len(sel))
                for p, i in enumerate(sel):
                    trace.append(
                        {"candidate": pos[i], "class": c, "distance": float(md[p]),
                         "cell": [sub[i].grid.row, sub[i].grid.col], "bucket": sub[i].scale.name.lower()}
                    )
        elif config.method == "random":
            sel = random_select(sub, k, cseed)
        elif config.method == "reservoir":
            sel = reservoir_select(range(len(sub)), k, cseed)
        else:
            if features is None:
                raise ContractError("herding selection needs candidate features")
            sel = herding_select(features[pos], k)
        chosen.extend(sub[i] for i in sel)
    return chosen


def mean_pairwise_distance(cands: list[Candidate]) -> float:
    if len(cands) < 2:
        return 0.0
    D = distance_matrix(cands)
    iu = np.triu_indices(len(cands), 1)
    return float(D[iu].mean())


def trace_jsonl(trace: list[dict]) -> str:
    return "".join(json.dumps(t, sort_keys=True) + "\n" for t in trace)
