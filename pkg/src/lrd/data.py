"""Synthetic detection task sequences and a small annotated-directory loader.

Class ``c`` is shape ``c // 2`` drawn in colour variant ``c % 2``; task ``t``
owns classes ``{2t, 2t+1}`` so each task introduces one new shape in both
colours. Every sample is a pure function of (seed, task, split, index).
"""

from __future__ import annotations

import bisect
import io
import json
import struct
from dataclasses import dataclass, field
from json import decoder as _jdec
from json import scanner as _jscan
from pathlib import Path

import numpy as np

from .core import BBox, ContractError, GroundTruth, iou

SHAPES = ("circle", "square", "triangle", "cross", "bar")
# two colour variants per shape, RGB in [0,1]
PALETTE = (
    ((0.90, 0.20, 0.15), (0.15, 0.35, 0.90)),
    ((0.95, 0.80, 0.10), (0.60, 0.15, 0.75)),
    ((0.10, 0.75, 0.30), (0.95, 0.50, 0.10)),
    ((0.85, 0.15, 0.60), (0.10, 0.80, 0.85)),
    ((0.55, 0.35, 0.15), (0.85, 0.85, 0.85)),
)


@dataclass
class SyntheticConfig:
    image_size: int = 64
    n_tasks: int = 5
    classes_per_task: int = 2
    min_objects: int = 1
    max_objects: int = 3
    n_train: int = 400
    n_test: int = 100
    min_side: int = 7
    max_side: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_tasks * self.classes_per_task > 2 * len(SHAPES):
            raise ContractError("not enough shape/colour combinations for the requested classes")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ContractError("object count range is invalid")

    @property
    def num_classes(self) -> int:
        return self.n_tasks * self.classes_per_task

    def task_classes(self, t: int) -> list[int]:
        k = self.classes_per_task
        return list(range(t * k, (t + 1) * k))


@dataclass
class AnnotatedSample:
    image: np.ndarray  # 3 x H x W float32 in [0,1]
    gt: GroundTruth


@dataclass
class TaskData:
    task_id: int
    classes: list[int]
    train: list[AnnotatedSample] = field(default_factory=list)
    test: list[AnnotatedSample] = field(default_factory=list)


def _shape_mask(shape: str, yy, xx, cy, cx, r, vertical: bool):
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        frac = (dy + r) / (2 * r)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= r * frac)
    if shape == "cross":
        t = max(r / 3.0, 0.75)
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if shape == "bar":
        t = max(r / 2.5, 1.0)
        if vertical:
            return (np.abs(dx) <= t) & (np.abs(dy) <= r)
        return (np.abs(dx) <= r) & (np.abs(dy) <= t)
    raise ContractError(f"unknown shape {shape}")


def render_sample(cfg: SyntheticConfig, t: int, index: int, split: str) -> AnnotatedSample:
    """Deterministically render one image of task ``t``."""
    S = cfg.image_size
    rng = np.random.default_rng([cfg.seed, t, 0 if split == "train" else 1, index])
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    # textured background: seeded low-amplitude noise over a random gradient
    base = rng.uniform(0.25, 0.55, size=3)
    gdir = rng.uniform(-1, 1, size=2)
    grad = (gdir[0] * (xx / S - 0.5) + gdir[1] * (yy / S - 0.5)) * 0.2
    img = base[:, None, None] + grad[None] + rng.normal(0, 0.04, size=(3, S, S))
    classes = cfg.task_classes(t)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes: list[BBox] = []
    labels: list[int] = []
    for _ in range(n_obj):
        for _attempt in range(20):
            c = int(classes[rng.integers(len(classes))])
            shape = SHAPES[c // 2]
            side = rng.uniform(cfg.min_side, cfg.max_side)
            r = side / 2
            cx = rng.uniform(r, S - r)
            cy = rng.uniform(r, S - r)
            vertical = bool(rng.integers(2))
            m = _shape_mask(shape, yy, xx, cy, cx, r, vertical)
            rows = np.nonzero(m.any(axis=1))[0]
            cols = np.nonzero(m.any(axis=0))[0]
            if len(rows) < 2 or len(cols) < 2:
                continue
            b = BBox(cols[0] / S, rows[0] / S, (cols[-1] + 1) / S, (rows[-1] + 1) / S)
            if any(iou(b, o) > 0.1 for o in boxes):
                continue
            colour = np.array(PALETTE[c // 2][c % 2]) + rng.normal(0, 0.03, size=3)
            img = np.where(m[None], colour[:, None, None] + rng.normal(0, 0.02, size=(3, S, S)), img)
            boxes.append(b)
            labels.append(c)
            break
    if not boxes:
        raise ContractError(f"could not place any object for task {t} index {index}")
    # quantise to 8 bits so cached datasets reload bit-exactly
    img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).astype(np.float32) / 255.0
    return AnnotatedSample(img.astype(np.float32), GroundTruth(boxes, labels))


def generate_task(cfg: SyntheticConfig, t: int) -> TaskData:
    if not 0 <= t < cfg.n_tasks:
        raise ContractError(f"task {t} outside [0, {cfg.n_tasks})")
    return TaskData(
        t,
        cfg.task_classes(t),
        [render_sample(cfg, t, i, "train") for i in range(cfg.n_train)],
        [render_sample(cfg, t, i, "test") for i in range(cfg.n_test)],
    )


def generate_sequence(cfg: SyntheticConfig) -> list[TaskData]:
    return [generate_task(cfg, t) for t in range(cfg.n_tasks)]


def stack_images(samples: list[AnnotatedSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


# -- binary dataset cache ---------------------------------------------------------
CACHE_MAGIC = b"LRDS"
CACHE_VERSION = 1


def _write_samples(fh, samples: list[AnnotatedSample]) -> None:
    fh.write(struct.pack("<I", len(samples)))
    for s in samples:
        _, H, W = s.image.shape
        fh.write(struct.pack("<HHH", H, W, len(s.gt)))
        for b, y in zip(s.gt.boxes, s.gt.labels):
            fh.write(struct.pack("<H4f", y, *b.as_tuple()))
        fh.write(np.round(s.image * 255).astype(np.uint8).tobytes())


def _read_samples(fh) -> list[AnnotatedSample]:
    def read(n):
        b = fh.read(n)
        if len(b) != n:
            raise CacheFormatError("truncated dataset cache")
        return b

    (n,) = struct.unpack("<I", read(4))
    out = []
    for _ in range(n):
        H, W, k = struct.unpack("<HHH", read(6))
        boxes, labels = [], []
        for _ in range(k):
            y, *coords = struct.unpack("<H4f", read(18))
            boxes.append(BBox(*coords))
            labels.append(y)
        img = np.frombuffer(read(3 * H * W), np.uint8).reshape(3, H, W).astype(np.float32) / 255.0
        out.append(AnnotatedSample(img, GroundTruth(boxes, labels)))
    return out


def save_cache(tasks: list[TaskData], path) -> None:
    with open(path, "wb") as fh:
        save_cache_fh(tasks, fh)


class CacheFormatError(ContractError):
    """The file is not a readable LRDS dataset cache."""


def load_cache(path) -> list[TaskData]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != CACHE_MAGIC:
            raise CacheFormatError(f"{path}: not an LRDS dataset cache (bad magic)")
        version, n = struct.unpack("<HH", head[4:])
        if version != CACHE_VERSION:
            raise CacheFormatError(f"{path}: cache version {version} unsupported")
        tasks = []
        for _ in range(n):
            tid, nc = struct.unpack("<HH", fh.read(4))
            classes = list(struct.unpack(f"<{nc}H", fh.read(2 * nc)))
            tasks.append(TaskData(tid, classes, _read_samples(fh), _read_samples(fh)))
    return tasks


# -- annotated directory ingestion --------------------------------------------------
class AnnotationError(ContractError):
    pass


class _LineDecoder(json.JSONDecoder):
    """JSON decoder that tags every object with the line it starts on."""

    def __init__(self, text: str):
        super().__init__()
        starts = [0] + [i + 1 for i, ch in enumerate(text) if ch == "\n"]

        def parse_object(s_and_end, strict, scan_once, object_hook, object_pairs_hook, memo=None, _w=_jdec.WHITESPACE.match):
            obj, end = _jdec.JSONObject(s_and_end, strict, scan_once, object_hook, object_pairs_hook, memo, _w)
            obj["__line__"] = bisect.bisect_right(starts, s_and_end[1] - 1)
            return obj, end

        self.parse_object = parse_object
        self.scan_once = _jscan.py_make_scanner(self)


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
        if arr.max() > 1.0:
            arr = arr / 255.0
    else:
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise AnnotationError(f"{path}: expected a 3-channel image, got shape {arr.shape}")
    return arr


def load_annotated_dir(path, index_name: str = "annotations.json") -> list[TaskData]:
    """Parse ``<path>/annotations.json`` into per-task datasets (all samples land in ``train``)."""
    root = Path(path)
    idx = root / index_name
    if not idx.exists():
        raise AnnotationError(f"missing annotation index {idx}")
    text = idx.read_text()
    try:
        doc = _LineDecoder(text).decode(text)
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{idx}:{e.lineno}: {e.msg}") from e
    classes = doc.get("classes", [])
    task_map = {str(k): int(v) for k, v in doc.get("task_map", {}).items() if k != "__line__"}
    cls_index = {str(c): i for i, c in enumerate(classes)}
    tasks: dict[int, TaskData] = {}
    for c, t in task_map.items():
        if c not in cls_index:
            raise AnnotationError(f"{idx}: task_map names undeclared class {c!r}")
        tasks.setdefault(t, TaskData(t, [])).classes.append(cls_index[c])
    for i, entry in enumerate(doc.get("images", [])):
        line = entry.get("__line__", "?")
        where = f"{idx}:{line}: images[{i}]"
        try:
            boxes, labels = [], []
            for j, o in enumerate(entry["objects"]):
                name = str(o["class"])
                if name not in cls_index:
                    raise AnnotationError(f"{where}.objects[{j}]: label {name!r} not in declared classes")
                try:
                    boxes.append(BBox(float(o["x1"]), float(o["y1"]), float(o["x2"]), float(o["y2"])))
                except ContractError as e:
                    raise AnnotationError(f"{idx}:{o.get('__line__', line)}: images[{i}].objects[{j}]: {e}") from None
                labels.append(cls_index[name])
            image = _load_image(root / entry["file"])
        except KeyError as e:
            raise AnnotationError(f"{where}: missing field {e.args[0]!r}") from None
        sample = AnnotatedSample(image, GroundTruth(boxes, labels))
        owners = {task_map.get(classes[y]) for y in labels}
        if None in owners or len(owners) != 1:
            raise AnnotationError(f"{where}: objects must all belong to one mapped task")
        tasks[owners.pop()].train.append(sample)
    return [tasks[t] for t in sorted(tasks)]


def dump_annotation_index(tasks_samples: list[tuple[str, AnnotatedSample]], classes: list[str], task_map: dict) -> str:
    """Serialise samples (file name, sample) into the index schema."""
    images = []
    for fname, s in tasks_samples:
        _, H, W = s.image.shape
        objs = [
            {"class": classes[y], "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2} for b, y in zip(s.gt.boxes, s.gt.labels)
        ]
        images.append({"file": fname, "width": W, "height": H, "objects": objs})
    return json.dumps({"images": images, "classes": classes, "task_map": task_map}, indent=1)


def to_bytes(tasks: list[TaskData]) -> bytes:
    buf = io.BytesIO()
    save_cache_fh(tasks, buf)
    return buf.getvalue()


def save_cache_fh(tasks: list[TaskData], fh) -> None:
    fh.write(CACHE_MAGIC + struct.pack("<HH", CACHE_VERSION, len(tasks)))
    for td in tasks:
        fh.write(struct.pack("<HH", td.task_id, len(td.classes)))
        fh.write(struct.pack(f"<{len(td.classes)}H", *td.classes))
        _write_samples(fh, td.train)
        _write_samples(fh, td.test)
