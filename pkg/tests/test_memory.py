import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrd.core import BBox, ContractError, GridCell, ScaleBucket, grid_cell, iou, scale_bucket
from lrd.memory import (
    HEADER,
    BadMagicError,
    BinaryMask,
    LatentRecord,
    MemoryBank,
    TruncatedStreamError,
    VersionMismatchError,
    capacity,
    deserialize,
    feature_mixup,
    grid_importance,
    insert,
    read_header,
    record_size,
    replay_weights,
    sample_replay_batch,
    serialize,
    spatial_cutmix,
)
from lrd.sampling import Candidate, fps_iou


def make_record(rng, d=32, task=0, box=None):
    if box is None:
        x1, y1 = rng.uniform(0, 0.7, 2)
        w, h = rng.uniform(0.05, 0.3, 2)
        box = BBox(x1, y1, x1 + w, y1 + h)
    z = rng.standard_normal(d).astype(np.float32)
    return LatentRecord(z, int(rng.integers(0, 10)), box, task, grid_cell(box), scale_bucket(box))


def test_capacity_fixtures():
    assert record_size(32) == 144
    assert capacity(65536, 32) == 455
    assert capacity(65536, 32) >= 400
    assert capacity(144, 32) == 1
    caps = [capacity(65536, d) for d in (16, 32, 64, 128)]
    assert caps == sorted(caps, reverse=True)
    assert caps == [65536 // 80, 455, 65536 // 272, 65536 // 528]


def test_record_layout_by_hand():
    box = BBox(0.0, 0.25, 0.5, 1.0)
    r = LatentRecord(np.array([1.5, -2.0], np.float32), 7, box, 3, GridCell(2, 1), ScaleBucket.LARGE)
    raw = r.pack()
    assert len(raw) == 16 + 8
    # hand-assembled oracle with struct, independent of the module's own format strings
    expect = bytes([3]) + (7).to_bytes(2, "little") + bytes([0x21, 2, 0, 0, 0])
    expect += b"".join(int(round(v * 65535)).to_bytes(2, "little") for v in (0.0, 0.25, 0.5, 1.0))
    expect += struct.pack("<2f", 1.5, -2.0)
    assert raw == expect


def test_empty_and_single_sizes():
    bank = MemoryBank(32)
    assert len(serialize(bank)) == 12
    bank = insert(bank, [make_record(np.random.default_rng(0))])
    assert len(serialize(bank)) == 12 + 144


def random_bank(rng, d):
    n = int(rng.integers(0, capacity(65536, d) + 1))
    return MemoryBank(d, 65536, [make_record(rng, d, int(rng.integers(0, 5))) for _ in range(n)])


def test_roundtrip_fuzz():
    rng = np.random.default_rng(1234)
    for i in range(40):
        d = (16, 32, 64, 128)[i % 4]
        bank = random_bank(rng, d)
        data = serialize(bank)
        back = deserialize(data)
        assert serialize(back) == data
        assert len(back) == len(bank)
        assert all(a.same_as(b) for a, b in zip(bank.records, back.records))


def test_roundtrip_455_records():
    rng = np.random.default_rng(5)
    bank = MemoryBank(32, 65536, [make_record(rng) for _ in range(455)])
    data = serialize(bank)
    assert len(data) == 12 + 455 * 144 <= 12 + 65536
    assert serialize(deserialize(data)) == data


def test_format_errors_are_distinct():
    data = serialize(insert(MemoryBank(16), [make_record(np.random.default_rng(0), 16)]))
    with pytest.raises(BadMagicError):
        deserialize(b"XXXX" + data[4:])
    bumped = HEADER.pack(b"LRDB", 2, 16, 1) + data[12:]
    with pytest.raises(VersionMismatchError):
        deserialize(bumped)
    with pytest.raises(TruncatedStreamError):
        deserialize(data[:-1])
    with pytest.raises(TruncatedStreamError):
        read_header(data[:8])


def test_insert_quota_arithmetic():
    rng = np.random.default_rng(0)
    budget = 10 * record_size(8)
    bank = MemoryBank(8, budget)
    bank = insert(bank, [make_record(rng, 8, 0) for _ in range(10)])
    assert len(bank) == 10
    bank = insert(bank, [make_record(rng, 8, 1) for _ in range(10)])
    assert bank.per_task() == {0: 5, 1: 5}


def test_insert_huge_budget_keeps_all():
    rng = np.random.default_rng(0)
    bank = insert(MemoryBank(32, 10**7), [make_record(rng) for _ in range(10)])
    assert len(bank) == 10


def test_record_larger_than_budget():
    with pytest.raises(ContractError):
        MemoryBank(32, 100)


def test_eviction_keeps_fps_first_elements():
    boxes = [BBox(0.0, 0.0, 0.3, 0.3), BBox(0.6, 0.6, 0.9, 0.9), BBox(0.01, 0.0, 0.31, 0.3), BBox(0.0, 0.6, 0.3, 0.9)]
    cands = [Candidate.make(i, b, 0) for i, b in enumerate(boxes)]
    order = fps_iou(cands, 3, first=0)
    rng = np.random.default_rng(0)
    recs = [make_record(rng, 8, 0, b) for b in boxes]
    bank = MemoryBank(8, 3 * record_size(8), [])
    bank = insert(bank, recs)
    kept = {r.bbox for r in bank.records}
    assert {recs[i].bbox for i in order} == kept
    # brute-force: the dropped box is one of the most redundant pair
    dropped = [r.bbox for r in recs if r.bbox not in kept]
    assert dropped == [recs[2].bbox]
    assert iou(boxes[0], boxes[2]) == max(iou(a, b) for i, a in enumerate(boxes) for b in boxes[i + 1 :])


def test_zero_quota_empties_the_bank():
    rng = np.random.default_rng(0)
    bank = insert(MemoryBank(8, record_size(8)), [make_record(rng, 8, 0)])
    bank = insert(bank, [make_record(rng, 8, 1) for _ in range(2)])
    assert len(bank) == 0 and bank.tasks_seen == {0, 1}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(1, 40)), min_size=1, max_size=8), st.integers(1, 60),
       st.sampled_from(["spatial", "random"]))
def test_budget_invariant_under_inserts(batches, cap, policy):
    d = 8
    rng = np.random.default_rng(cap)
    bank = MemoryBank(d, cap * record_size(d) + int(rng.integers(0, record_size(d))))
    for task, n in batches:
        before = len(bank) + n
        bank = insert(bank, [make_record(rng, d, task) for _ in range(n)], policy=policy, seed=task)
        assert bank.size_bytes <= bank.budget_bytes
        assert len(serialize(bank)) - 12 <= bank.budget_bytes
        if before > bank.capacity:
            quota = bank.capacity // len(bank.tasks_seen)
            assert all(c <= quota for c in bank.per_task().values())


def test_grid_importance():
    assert np.all(grid_importance([], 3) == 0)
    I = grid_importance([BBox(0, 0, 1 / 3, 1 / 3)], 3)
    assert I[0, 0] == pytest.approx(1.0)
    assert I.sum() == pytest.approx(1.0)
    # half of cell (0,0) at G=2: box (0,0,.25,.5) vs cell (0,0,.5,.5) -> IoU 0.5
    I = grid_importance([BBox(0, 0, 0.25, 0.5)], 2)
    assert I[0, 0] == pytest.approx(0.5)
    assert I[0, 1] == 0 and I[1, 0] == 0


def test_sample_replay_uniform_all():
    rng = np.random.default_rng(0)
    bank = MemoryBank(8, 10**5, [make_record(rng, 8) for _ in range(6)])
    recs, trunc = sample_replay_batch(bank, 6, None, 0)
    assert len(recs) == 6 and not trunc
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        recs, trunc = sample_replay_batch(bank, 9, None, 0)
    assert len(recs) == 6 and trunc


def test_sample_replay_cold_temperature():
    rng = np.random.default_rng(0)
    hot = BBox(0.0, 0.0, 0.2, 0.2)
    recs = [make_record(rng, 8, 0, hot) for _ in range(3)]
    recs += [make_record(rng, 8, 0, BBox(0.7, 0.7, 0.9, 0.9)) for _ in range(5)]
    bank = MemoryBank(8, 10**5, recs)
    I = np.zeros((3, 3))
    I[0, 0] = 1.0
    got, _ = sample_replay_batch(bank, 3, I, 1, temperature=1e-3)
    assert all(r.grid == GridCell(0, 0) for r in got)


def test_replay_frequency_monte_carlo():
    rng = np.random.default_rng(0)
    recs = [make_record(rng, 4, 0, BBox(0.0, 0.0, 0.2, 0.2)), make_record(rng, 4, 0, BBox(0.7, 0.7, 0.9, 0.9)),
            make_record(rng, 4, 0, BBox(0.4, 0.4, 0.6, 0.6))]
    bank = MemoryBank(4, 10**4, recs)
    I = np.array([[2.0, 0, 0], [0, 1.0, 0], [0, 0, 0.0]])
    w = replay_weights(bank, I)
    e = np.exp([2.0, 0.0, 1.0])
    assert np.allclose(w, e / e.sum())
    g = np.random.default_rng(7)
    counts = np.zeros(3)
    N = 10_000
    for _ in range(N):
        r, _ = sample_replay_batch(bank, 1, I, g)
        counts[[id(x) for x in recs].index(id(r[0]))] += 1
    sigma = np.sqrt(N * w * (1 - w))
    assert np.all(np.abs(counts - N * w) < 3 * sigma)


def test_mixup_fixtures():
    zi, zj = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    z, y, lam = feature_mixup(zi, zj, [1, 0], [0, 1], lam=1.0)
    assert np.array_equal(z, zi) and np.array_equal(y, [1, 0])
    z, y, _ = feature_mixup(zi, zj, [1, 0], [0, 1], lam=0.5)
    assert np.allclose(z, [1, 1]) and np.allclose(y, [0.5, 0.5])
    with pytest.raises(ContractError):
        feature_mixup(zi, np.zeros(3), [1], [1])


def test_mixup_lambda_mean():
    g = np.random.default_rng(3)
    lams = np.array([feature_mixup([0.0], [1.0], [1], [0], 0.2, g)[2] for _ in range(10_000)])
    # Beta(0.2, 0.2): mean 1/2, variance 1/(4 * 1.4)
    sd = np.sqrt(1 / (4 * 1.4) / len(lams))
    assert abs(lams.mean() - 0.5) < 3 * sd


@given(st.floats(0, 1), st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_mixup_on_segment(lam, a, b):
    z, _, _ = feature_mixup(a, b, [1], [0], lam=lam)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(z >= lo - 1e-9) and np.all(z <= hi + 1e-9)


def test_cutmix_fixtures():
    Fi, Fj = np.full((2, 4, 4), 3.0), np.full((2, 4, 4), -1.0)
    oi = [(BBox(0.0, 0.0, 0.2, 0.2), 1)]
    oj = [(BBox(0.7, 0.7, 0.9, 0.9), 2)]
    out, kept = spatial_cutmix(Fi, Fj, BinaryMask(np.ones((4, 4), np.uint8)), oi, oj)
    assert np.array_equal(out, Fi) and kept == oi
    out, kept = spatial_cutmix(Fi, Fj, BinaryMask(np.zeros((4, 4), np.uint8)), oi, oj)
    assert np.array_equal(out, Fj) and kept == oj
    half = BinaryMask.rect(4, 4, 0, 4, 0, 2)
    out, kept = spatial_cutmix(Fi, Fj, half, oi, oj)
    assert np.all(out[:, :, :2] == 3.0) and np.all(out[:, :, 2:] == -1.0)
    assert kept == oi + oj
    with pytest.raises(ContractError):
        spatial_cutmix(Fi, np.zeros((2, 4, 5)), half)


def test_cutmix_complementary_partition():
    rng = np.random.default_rng(0)
    Fi, Fj = rng.standard_normal((3, 6, 6)), rng.standard_normal((3, 6, 6))
    m = BinaryMask.random(6, 6, rng)
    a, _ = spatial_cutmix(Fi, Fj, m)
    b, _ = spatial_cutmix(Fj, Fi, m)  # complementary mask expressed by swapping the inputs
    M = m.m.astype(bool)
    assert np.array_equal(np.where(M, a, b), Fi)
    assert np.array_equal(np.where(M, b, a), Fj)


def test_mask_must_be_rectangle():
    m = np.zeros((4, 4), np.uint8)
    m[0, 0] = m[3, 3] = 1
    with pytest.raises(ContractError):
        BinaryMask(m)
