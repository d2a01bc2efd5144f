"""Byte-budgeted latent replay buffer.

Buffer file layout (all little-endian)::

    header  : b"LRDB" | version u16 (=1) | d u16 | count u32          12 bytes
    record  : task u8 | class u16 | grid u8 | scale u8 | pad[3]
              | x1 y1 x2 y2 as u16 fixed point (v / 65535)            16 bytes
              | d x f32 latent                                         4d bytes

``grid`` packs the cell as ``row << 4 | col`` so grids up to 16 x 16 fit.
"""

from __future__ import annotations

import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .core import BBox, ContractError, GridCell, ScaleBucket, iou_matrix

MAGIC = b"LRDB"
VERSION = 1
HEADER = struct.Struct("<4sHHI")
RECORD_HEAD = struct.Struct("<BHBB3x4H")
RECORD_OVERHEAD = RECORD_HEAD.size  # 16
Q = 65535


class BufferFormatError(ValueError):
    pass


class BadMagicError(BufferFormatError):
    pass


class VersionMismatchError(BufferFormatError):
    pass


class TruncatedStreamError(BufferFormatError):
    pass


def record_size(d: int) -> int:
    return RECORD_OVERHEAD + 4 * d


def capacity(budget_bytes: int, d: int) -> int:
    if d <= 0:
        raise ContractError("latent dim must be positive")
    return budget_bytes // record_size(d)


def _fixed_point(b: BBox) -> list[int]:
    q = [int(round(v * Q)) for v in b.as_tuple()]
    if q[2] <= q[0]:
        q[2] = min(q[0] + 1, Q)
        q[0] = q[2] - 1
    if q[3] <= q[1]:
        q[3] = min(q[1] + 1, Q)
        q[1] = q[3] - 1
    return q


def quantize_box(b: BBox) -> BBox:
    """Snap coordinates to the u16 fixed-point grid used on disk."""
    return BBox(*(v / Q for v in _fixed_point(b)))


@dataclass
class LatentRecord:
    z: np.ndarray
    cls: int
    bbox: BBox
    task: int
    grid: GridCell
    scale: ScaleBucket

    def __post_init__(self):
        self.z = np.ascontiguousarray(self.z, dtype="<f4").reshape(-1)
        self._q = _fixed_point(self.bbox)
        self.bbox = BBox(*(v / Q for v in self._q))
        self.scale = ScaleBucket(self.scale)
        if not (0 <= self.task < 256 and 0 <= self.cls < 65536):
            raise ContractError("task/class id out of the serialisable range")
        if not (0 <= self.grid.row < 16 and 0 <= self.grid.col < 16):
            raise ContractError("grid cell out of the serialisable range")

    @property
    def nbytes(self) -> int:
        return record_size(len(self.z))

    def pack(self) -> bytes:
        head = RECORD_HEAD.pack(self.task, self.cls, (self.grid.row << 4) | self.grid.col, int(self.scale), *self._q)
        return head + self.z.tobytes()

    @classmethod
    def unpack(cls, buf: bytes, d: int) -> "LatentRecord":
        task, c, g, s, *q = RECORD_HEAD.unpack_from(buf, 0)
        z = np.frombuffer(buf, dtype="<f4", count=d, offset=RECORD_OVERHEAD).copy()
        return cls(z, c, BBox(*(v / Q for v in q)), task, GridCell(g >> 4, g & 15), ScaleBucket(s))

    def same_as(self, other: "LatentRecord") -> bool:
        return self.pack() == other.pack()


@dataclass
class MemoryBank:
    d: int = 32
    budget_bytes: int = 65536
    records: list[LatentRecord] = field(default_factory=list)
    tasks_seen: set[int] = field(default_factory=set)

    def __post_init__(self):
        if record_size(self.d) > self.budget_bytes:
            raise ContractError(
                f"budget_bytes={self.budget_bytes} is smaller than one record ({record_size(self.d)} bytes)"
            )

    def __len__(self):
        return len(self.records)

    @property
    def capacity(self) -> int:
        return capacity(self.budget_bytes, self.d)

    @property
    def size_bytes(self) -> int:
        return sum(r.nbytes for r in self.records)

    def per_task(self) -> dict[int, int]:
        return dict(sorted(Counter(r.task for r in self.records).items()))

    def per_cell(self) -> dict[tuple[int, int], int]:
        return dict(sorted(Counter((r.grid.row, r.grid.col) for r in self.records).items()))

    def clone(self) -> "MemoryBank":
        return MemoryBank(self.d, self.budget_bytes, list(self.records), set(self.tasks_seen))


def _spatial_evict_order(recs: list[LatentRecord], n_evict: int) -> list[int]:
    """Positions to drop: repeatedly the record nearest (in 1 - IoU) to another.

    Ties go to the latest position so earlier (higher-priority) exemplars stay.
    """
    boxes = np.array([r.bbox.as_tuple() for r in recs])
    D = 1.0 - iou_matrix(boxes, boxes)
    np.fill_diagonal(D, np.inf)
    alive = np.ones(len(recs), bool)
    out = []
    for _ in range(n_evict):
        sub = np.where(alive[:, None] & alive[None, :], D, np.inf)
        md = sub.min(axis=1)
        md[~alive] = np.inf
        m = md.min()
        j = int(np.flatnonzero(alive & (md == m))[-1])  # last survivor has md = inf too
        alive[j] = False
        out.append(j)
    return out


def insert(bank: MemoryBank, exemplars: list[LatentRecord], policy: str = "spatial", seed: int = 0) -> MemoryBank:
    """Add records; when over budget, cut every task to floor(capacity / tasks_seen).

    ``policy`` picks which records an over-quota task loses: 'spatial'
    (least spatially distinctive first) or 'random'.
    """
    for r in exemplars:
        if len(r.z) != bank.d:
            raise ContractError(f"record latent length {len(r.z)} != bank d {bank.d}")
        if r.nbytes > bank.budget_bytes:
            raise ContractError("record larger than the whole budget")
    out = bank.clone()
    out.records.extend(exemplars)
    out.tasks_seen |= {r.task for r in exemplars}
    if out.size_bytes <= out.budget_bytes:
        return out
    quota = out.capacity // max(1, len(out.tasks_seen))
    rng = np.random.default_rng(seed)
    keep: list[LatentRecord] = []
    for t in sorted(out.tasks_seen):
        recs = [r for r in out.records if r.task == t]
        excess = len(recs) - quota
        if excess > 0:
            if policy == "spatial":
                drop = set(_spatial_evict_order(recs, excess))
            elif policy == "random":
                drop = set(int(i) for i in rng.choice(len(recs), excess, replace=False))
            else:
                raise ContractError(f"unknown eviction policy {policy!r}")
            recs = [r for i, r in enumerate(recs) if i not in drop]
        keep.extend(recs)
    out.records = keep
    return out


# -- serialisation ---------------------------------------------------------------
def serialize(bank: MemoryBank) -> bytes:
    parts = [HEADER.pack(MAGIC, VERSION, bank.d, len(bank.records))]
    parts.extend(r.pack() for r in bank.records)
    return b"".join(parts)


def read_header(data: bytes) -> tuple[int, int, int]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < HEADER.size:
        raise TruncatedStreamError(f"header needs {HEADER.size} bytes, got {len(data)}")
    _, version, d, count = HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionMismatchError(f"buffer version {version}, this reader supports {VERSION}")
    return version, d, count


def deserialize(data: bytes, budget_bytes: int | None = None) -> MemoryBank:
    _, d, count = read_header(data)
    rs = record_size(d)
    need = HEADER.size + count * rs
    if len(data) < need:
        raise TruncatedStreamError(f"stream holds {len(data)} bytes, header promises {need}")
    recs = [LatentRecord.unpack(data[HEADER.size + i * rs : HEADER.size + (i + 1) * rs], d) for i in range(count)]
    budget = budget_bytes if budget_bytes is not None else max(65536, count * rs, rs)
    return MemoryBank(d, budget, recs, {r.task for r in recs})


# -- replay sampling ----------------------------------------------------------------
def grid_importance(boxes: list[BBox], G: int = 3) -> np.ndarray:
    """I[i, j] = sum over boxes overlapping cell (i, j) of IoU(box, cell)."""
    if G < 1:
        raise ContractError("grid size must be >= 1")
    I = np.zeros((G, G))
    if not boxes:
        return I
    cells = np.array([(j / G, i / G, (j + 1) / G, (i + 1) / G) for i in range(G) for j in range(G)])
    M = iou_matrix(np.array([b.as_tuple() for b in boxes]), cells)
    return M.sum(axis=0).reshape(G, G)


@dataclass
class ReplayAugConfig:
    mixup_alpha: float = 0.2
    mixup: bool = False
    cutmix: bool = False
    importance: bool = True
    temperature: float = 1.0

    def __post_init__(self):
        if self.mixup_alpha <= 0:
            raise ContractError("mixup alpha must be positive")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")


def replay_weights(bank: MemoryBank, importance: np.ndarray | None, temperature: float = 1.0) -> np.ndarray:
    n = len(bank)
    if importance is None:
        return np.full(n, 1.0 / n)
    logits = np.array([importance[r.grid.row, r.grid.col] for r in bank.records]) / temperature
    w = np.exp(logits - logits.max())
    return w / w.sum()


def sample_replay_batch(
    bank: MemoryBank,
    n: int,
    importance: np.ndarray | None = None,
    rng: np.random.Generator | int | None = None,
    temperature: float = 1.0,
) -> tuple[list[LatentRecord], bool]:
    """Draw ``n`` records without replacement; returns (records, truncated)."""
    if len(bank) == 0:
        raise ContractError("cannot sample from an empty bank")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if n >= len(bank):
        if n > len(bank):
            warnings.warn(f"requested {n} replay records from a bank of {len(bank)}", stacklevel=2)
        return list(bank.records), n > len(bank)
    p = replay_weights(bank, importance, temperature)
    idx = rng.choice(len(bank), size=n, replace=False, p=p)
    return [bank.records[int(i)] for i in idx], False


# -- feature-level augmentation ---------------------------------------------------------
def feature_mixup(zi, zj, yi, yj, alpha: float = 0.2, rng=None, lam: float | None = None):
    """Convex mix of two latents and their (one-hot or soft) labels."""
    zi = np.asarray(zi, dtype=np.float64)
    zj = np.asarray(zj, dtype=np.float64)
    if zi.shape != zj.shape:
        raise ContractError(f"latent length mismatch {zi.shape} vs {zj.shape}")
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    if lam is None:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        lam = float(rng.beta(alpha, alpha))
    y = lam * np.asarray(yi, dtype=np.float64) + (1 - lam) * np.asarray(yj, dtype=np.float64)
    return lam * zi + (1 - lam) * zj, y, lam


@dataclass
class BinaryMask:
    m: np.ndarray  # H x W of {0, 1}

    def __post_init__(self):
        self.m = np.asarray(self.m).astype(np.uint8)
        if self.m.ndim != 2 or not np.isin(self.m, (0, 1)).all():
            raise ContractError("mask must be a 2-D {0,1} grid")
        if self.m.any():
            rows = np.nonzero(self.m.any(axis=1))[0]
            cols = np.nonzero(self.m.any(axis=0))[0]
            box = self.m[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
            if not box.all() or self.m.sum() != box.size:
                raise ContractError("mask ones must form a single rectangle")

    @classmethod
    def rect(cls, H: int, W: int, r0: int, r1: int, c0: int, c1: int) -> "BinaryMask":
        m = np.zeros((H, W), np.uint8)
        m[r0:r1, c0:c1] = 1
        return cls(m)

    @classmethod
    def random(cls, H: int, W: int, rng: np.random.Generator, alpha: float = 1.0) -> "BinaryMask":
        lam = rng.beta(alpha, alpha)
        h = max(1, int(round(H * np.sqrt(lam))))
        w = max(1, int(round(W * np.sqrt(lam))))
        r0 = int(rng.integers(0, H - h + 1))
        c0 = int(rng.integers(0, W - w + 1))
        return cls.rect(H, W, r0, r0 + h, c0, c0 + w)


def spatial_cutmix(Fi, Fj, mask: BinaryMask, objs_i=(), objs_j=()):
    """M * Fi + (1 - M) * Fj over the trailing H x W axes.

    ``objs_*`` are (BBox, label) pairs; each survives when its center falls
    in the region its own map contributes.
    """
    Fi = np.asarray(Fi)
    Fj = np.asarray(Fj)
    if Fi.shape != Fj.shape:
        raise ContractError(f"cutmix shape mismatch {Fi.shape} vs {Fj.shape}")
    m = mask.m.astype(Fi.dtype)
    H, W = m.shape
    if Fi.shape[-2:] != (H, W):
        raise ContractError("mask does not match feature spatial size")
    out = m * Fi + (1 - m) * Fj

    def center_val(b: BBox) -> int:
        cx, cy = b.center
        return int(mask.m[min(int(cy * H), H - 1), min(int(cx * W), W - 1)])

    kept = [o for o in objs_i if center_val(o[0]) == 1] + [o for o in objs_j if center_val(o[0]) == 0]
    return out, kept
