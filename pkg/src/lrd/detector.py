"""Tiny anchor-free detector: three stride-2 conv blocks, a two-level pyramid
(8x8 and 4x4 for a 64x64 input) and a 3x3 conv head per level.

Each head cell emits C+1 class logits (index C is background) followed by
four box offsets (dcx, dcy, log w/prior, log h/prior). An object is assigned
to the cell holding its center on the fine level when it is small or medium
and on the coarse level when it is large.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamSet, Tape, Var, he_uniform
from .compression import Level
from .core import BBox, ContractError, GroundTruth, ScaleBucket, iou_matrix, scale_bucket


LEVELS = (Level.P3, Level.P4)
BOX_PRIOR = {Level.P3: 0.15, Level.P4: 0.5}


@dataclass
class DetectorConfig:
    num_classes: int = 10
    image_size: int = 64
    channels: tuple[int, int, int] = (8, 16, 16)
    p4_channels: int = 48

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1 + 4

    def level_shape(self, level: Level) -> tuple[int, int, int]:
        s = self.image_size // 8
        if Level(level) == Level.P3:
            return (self.channels[2], s, s)
        if Level(level) == Level.P4:
            return (self.p4_channels, s // 2, s // 2)
        raise ContractError(f"detector has no level {level}")


def init_detector(cfg: DetectorConfig, rng: np.random.Generator) -> ParamSet:
    p = ParamSet()
    cin = 3
    for i, c in enumerate(cfg.channels, 1):
        p[f"backbone/c{i}.w"] = he_uniform(rng, (c, cin, 3, 3), cin * 9)
        p[f"backbone/c{i}.b"] = np.zeros(c, np.float32)
        cin = c
    p["neck/p4.w"] = he_uniform(rng, (cfg.p4_channels, cin, 3, 3), cin * 9)
    p["neck/p4.b"] = np.zeros(cfg.p4_channels, np.float32)
    K = cfg.out_channels
    for lvl in LEVELS:
        c = cfg.level_shape(lvl)[0]
        p[f"head/{lvl.value}.w"] = he_uniform(rng, (K, c, 3, 3), c * 9, 0.5)
        b = np.zeros(K, np.float32)
        # start confident in background so early training is stable
        b[cfg.num_classes] = 2.0
        p[f"head/{lvl.value}.b"] = b
    return p


def n_params(params: ParamSet) -> int:
    return params.n_params()


def backbone_forward(tape: Tape, bound: dict[str, Var], images: Var, cfg: DetectorConfig) -> dict[Level, Var]:
    if images.data.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ContractError(f"expected N x 3 x {cfg.image_size} x {cfg.image_size} images, got {images.shape}")
    x = images
    for i in range(1, len(cfg.channels) + 1):
        x = tape.relu(tape.conv2d(x, bound[f"backbone/c{i}.w"], bound[f"backbone/c{i}.b"], stride=2, pad=1))
    p4 = tape.relu(tape.conv2d(x, bound["neck/p4.w"], bound["neck/p4.b"], stride=2, pad=1))
    return {Level.P3: x, Level.P4: p4}


def head_forward(tape: Tape, bound: dict[str, Var], feats: dict[Level, Var]) -> dict[Level, Var]:
    return {
        lvl: tape.conv2d(F, bound[f"head/{lvl.value}.w"], bound[f"head/{lvl.value}.b"], stride=1, pad=1)
        for lvl, F in feats.items()
    }


def forward(tape: Tape, bound: dict[str, Var], images: Var, cfg: DetectorConfig):
    """Returns (raw outputs per level, pyramid features per level)."""
    feats = backbone_forward(tape, bound, images, cfg)
    return head_forward(tape, bound, feats), feats


# -- targets ---------------------------------------------------------------------
def level_for(box: BBox) -> Level:
    return Level.P4 if scale_bucket(box) == ScaleBucket.LARGE else Level.P3


def encode_box(box: BBox, level: Level, S: int) -> tuple[int, int, np.ndarray]:
    cx, cy = box.center
    row = min(int(math.floor(cy * S)), S - 1)
    col = min(int(math.floor(cx * S)), S - 1)
    prior = BOX_PRIOR[level]
    off = np.array(
        [cx * S - (col + 0.5), cy * S - (row + 0.5), math.log(box.width / prior), math.log(box.height / prior)]
    )
    return row, col, off


def decode_box(off, row: int, col: int, level: Level, S: int) -> BBox:
    prior = BOX_PRIOR[level]
    cx = (col + 0.5 + float(np.clip(off[0], -0.5, 0.5))) / S
    cy = (row + 0.5 + float(np.clip(off[1], -0.5, 0.5))) / S
    w = prior * math.exp(float(np.clip(off[2], -6.0, 2.0)))
    h = prior * math.exp(float(np.clip(off[3], -6.0, 2.0)))
    w, h = min(w, 1.0), min(h, 1.0)
    x1, y1 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
    x2, y2 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
    eps = 1e-4
    if x2 - x1 < eps:
        x1, x2 = (x1, x1 + eps) if x1 + eps <= 1.0 else (1.0 - eps, 1.0)
    if y2 - y1 < eps:
        y1, y2 = (y1, y1 + eps) if y1 + eps <= 1.0 else (1.0 - eps, 1.0)
    return BBox(x1, y1, x2, y2)


@dataclass
class TargetAssignment:
    """Per-level dense targets for a batch."""

    cls: dict[Level, np.ndarray]  # (N, S, S) int, background = num_classes
    soft: dict[Level, np.ndarray | None]  # optional (N, S, S, C+1) soft class targets
    box: dict[Level, np.ndarray]  # (N, S, S, 4)
    box_w: dict[Level, np.ndarray]  # (N, S, S) regression weight (0 for negatives)
    n_pos: float
    dropped: int = 0
    cls_w: dict[Level, np.ndarray] | None = None  # (N, S, S) classification weight; None means every cell


def assign_targets(
    gts: list[GroundTruth],
    cfg: DetectorConfig,
    levels=LEVELS,
    seen_classes: set[int] | None = None,
) -> TargetAssignment:
    """Center-cell assignment; two objects in one cell keep the larger one."""
    N = len(gts)
    bg = cfg.num_classes
    cls, box, box_w, area = {}, {}, {}, {}
    for lvl in levels:
        S = cfg.level_shape(lvl)[1]
        cls[lvl] = np.full((N, S, S), bg, dtype=np.int64)
        box[lvl] = np.zeros((N, S, S, 4))
        box_w[lvl] = np.zeros((N, S, S))
        area[lvl] = np.zeros((N, S, S))
    dropped = 0
    for n, gt in enumerate(gts):
        for b, y in zip(gt.boxes, gt.labels):
            if not 0 <= y < cfg.num_classes or (seen_classes is not None and y not in seen_classes):
                raise ContractError(f"label {y} outside the seen class set")
            lvl = level_for(b)
            if lvl not in cls:
                continue
            S = cfg.level_shape(lvl)[1]
            r, c, off = encode_box(b, lvl, S)
            if box_w[lvl][n, r, c] > 0:
                dropped += 1
                if b.area <= area[lvl][n, r, c]:
                    continue
            cls[lvl][n, r, c] = y
            box[lvl][n, r, c] = off
            box_w[lvl][n, r, c] = 1.0
            area[lvl][n, r, c] = b.area
    n_pos = float(sum(w.sum() for w in box_w.values()))
    return TargetAssignment(cls, {lvl: None for lvl in cls}, box, box_w, n_pos, dropped)


def detection_loss(tape: Tape, raw: dict[Level, Var], targets: TargetAssignment, num_classes: int) -> Var:
    """Cross-entropy over every cell plus smooth-L1 on positive cells, normalised by positives."""
    K1 = num_classes + 1
    terms = []
    norm = 1.0 / max(1.0, targets.n_pos)
    for lvl, out in raw.items():
        N, K, S, _ = out.shape
        flat = tape.reshape(tape.transpose(out, (0, 2, 3, 1)), (N * S * S, K))
        logits = tape.slice_cols(flat, 0, K1)
        offs = tape.slice_cols(flat, K1, K)
        soft = targets.soft.get(lvl)
        tgt = soft.reshape(-1, K1) if soft is not None else targets.cls[lvl].reshape(-1)
        cw = None if targets.cls_w is None else targets.cls_w[lvl].reshape(-1)
        terms.append((norm, tape.softmax_ce(logits, tgt, weight=cw)))
        w = targets.box_w[lvl].reshape(-1, 1)
        if w.any():
            terms.append((norm, tape.smooth_l1(offs, targets.box[lvl].reshape(-1, 4), weight=w)))
    return tape.weighted_sum(terms)


# -- decoding ---------------------------------------------------------------------
@dataclass
class Detection:
    bbox: BBox
    cls: int
    score: float


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def nms(dets: list[Detection], iou_thr: float = 0.5) -> list[Detection]:
    """Per-class greedy suppression in descending score order."""
    kept: list[Detection] = []
    by_cls: dict[int, list[Detection]] = {}
    for d in dets:
        by_cls.setdefault(d.cls, []).append(d)
    for c in sorted(by_cls):
        items = sorted(by_cls[c], key=lambda d: -d.score)
        boxes = np.array([d.bbox.as_tuple() for d in items])
        M = iou_matrix(boxes, boxes)
        alive = np.ones(len(items), bool)
        for i in range(len(items)):
            if not alive[i]:
                continue
            kept.append(items[i])
            alive[i + 1 :] &= M[i, i + 1 :] <= iou_thr
    return kept


def decode_and_nms(
    raw: dict[Level, np.ndarray],
    num_classes: int,
    score_thr: float = 0.3,
    iou_thr: float = 0.5,
    allowed: set[int] | None = None,
) -> list[Detection]:
    """Detections for a single image from its raw per-level outputs (K, S, S)."""
    dets = []
    for lvl, out in raw.items():
        out = np.asarray(out, dtype=np.float64)
        K, S, _ = out.shape
        probs = _softmax(out[: num_classes + 1], axis=0)[:num_classes]
        cs, rs, cols = np.nonzero(probs >= score_thr)
        for c, r, col in zip(cs, rs, cols):
            if allowed is not None and int(c) not in allowed:
                continue
            b = decode_box(out[num_classes + 1 :, r, col], int(r), int(col), lvl, S)
            dets.append(Detection(b, int(c), float(probs[c, r, col])))
    return nms(dets, iou_thr)


def predict(params: ParamSet, images: np.ndarray, cfg: DetectorConfig, batch: int = 50, **kw) -> list[list[Detection]]:
    out = []
    for s in range(0, len(images), batch):
        tape = Tape()
        bound = {k: Var(v) for k, v in params.items()}
        raw, _ = forward(tape, bound, Var(images[s : s + batch]), cfg)
        for n in range(raw[LEVELS[0]].shape[0]):
            out.append(decode_and_nms({lvl: r.data[n] for lvl, r in raw.items()}, cfg.num_classes, **kw))
    return out


# -- evaluation --------------------------------------------------------------------
def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from a score-ordered TP indicator."""
    if n_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class MapResult:
    per_class: dict[int, float]
    mAP: float
    matched_iou: float | None = None
    extra: dict = field(default_factory=dict)


def evaluate_map(
    dets: list[list[Detection]],
    gts: list[GroundTruth],
    iou_thr: float = 0.5,
    classes: list[int] | None = None,
) -> MapResult:
    """mAP@iou_thr over ``classes`` (default: every class with ground truth).

    Each ground truth matches at most one detection; detections are visited
    by descending score (stable on image order) and take the best-IoU
    unmatched ground truth of their class.
    """
    if classes is None:
        classes = sorted({y for g in gts for y in g.labels})
    per_class = {}
    best_ious = []
    for c in classes:
        gt_boxes = {i: np.array([b.as_tuple() for b, y in zip(g.boxes, g.labels) if y == c]) for i, g in enumerate(gts)}
        n_gt = sum(len(v) for v in gt_boxes.values())
        if n_gt == 0:
            continue
        cand = [(d.score, i, d) for i, ds in enumerate(dets) for d in ds if d.cls == c]
        cand.sort(key=lambda t: -t[0])
        used = {i: np.zeros(len(v), bool) for i, v in gt_boxes.items()}
        tp = np.zeros(len(cand))
        for j, (_, i, d) in enumerate(cand):
            if len(gt_boxes[i]) == 0:
                continue
            ious = iou_matrix([d.bbox.as_tuple()], gt_boxes[i])[0]
            ious = np.where(used[i], -1.0, ious)
            k = int(np.argmax(ious))
            if ious[k] >= iou_thr:
                used[i][k] = True
                tp[j] = 1.0
        per_class[c] = average_precision(tp, n_gt)
        for i, boxes in gt_boxes.items():
            own = [d.bbox.as_tuple() for d in dets[i] if d.cls == c]
            if len(boxes) and own:
                m = iou_matrix(boxes, own).max(axis=1)
                best_ious.extend(m[m > 0].tolist())
    mAP = float(np.mean(list(per_class.values()))) if per_class else 0.0
    matched = float(np.mean(best_ious)) if best_ious else None
    return MapResult(per_class, mAP, matched)
