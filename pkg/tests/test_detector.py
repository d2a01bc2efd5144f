import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrd import detector as det
from lrd.autodiff import Adam, ParamSet, Tape, Var, backward
from lrd.compression import Level
from lrd.core import BBox, ContractError, GroundTruth

CFG = det.DetectorConfig(num_classes=4)


def D(box, cls=0, score=0.5):
    return det.Detection(BBox(*box), cls, score)


def test_parameter_budget_and_shapes():
    p = det.init_detector(det.DetectorConfig(), np.random.default_rng(0))
    assert p.n_params() <= 150_000
    tape = Tape()
    raw, feats = det.forward(tape, {k: Var(v) for k, v in p.items()}, Var(np.zeros((2, 3, 64, 64), np.float32)),
                             det.DetectorConfig())
    assert raw[Level.P3].shape == (2, 15, 8, 8) and raw[Level.P4].shape == (2, 15, 4, 4)
    assert feats[Level.P3].shape == (2, 16, 8, 8) and feats[Level.P4].shape == (2, 48, 4, 4)


def test_zero_weights_zero_logits_and_determinism():
    p = det.init_detector(CFG, np.random.default_rng(0)).scaled(0.0)
    tape = Tape()
    raw, _ = det.forward(tape, {k: Var(v) for k, v in p.items()}, Var(np.zeros((1, 3, 64, 64), np.float32)), CFG)
    assert all(np.array_equal(r.data, np.zeros_like(r.data)) for r in raw.values())
    p = det.init_detector(CFG, np.random.default_rng(1))
    x = np.random.default_rng(2).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
    x2 = np.concatenate([x, x])
    raw, _ = det.forward(Tape(), {k: Var(v) for k, v in p.items()}, Var(x2), CFG)
    assert np.array_equal(raw[Level.P3].data[0], raw[Level.P3].data[1])


def test_wrong_image_shape():
    p = det.init_detector(CFG, np.random.default_rng(0))
    with pytest.raises(ContractError):
        det.forward(Tape(), {k: Var(v) for k, v in p.items()}, Var(np.zeros((1, 3, 32, 32))), CFG)


def test_box_encoding_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w, h = rng.uniform(0.03, 0.7, 2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        b = BBox(x, y, x + w, y + h)
        lvl = det.level_for(b)
        S = CFG.level_shape(lvl)[1]
        r, c, off = det.encode_box(b, lvl, S)
        back = det.decode_box(off, r, c, lvl, S)
        assert np.allclose(back.as_tuple(), b.as_tuple(), atol=1e-9)


@settings(max_examples=60)
@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.integers(0, 7), st.integers(0, 7))
def test_decoded_boxes_always_valid(off, r, c):
    b = det.decode_box(np.array(off), r, c, Level.P3, 8)
    assert 0 <= b.x1 < b.x2 <= 1 and 0 <= b.y1 < b.y2 <= 1


def test_assignment_totality_and_tie_rule():
    small = BBox.from_center(0.3, 0.3, 0.1, 0.1)
    big_same_cell = BBox.from_center(0.31, 0.31, 0.2, 0.2)
    large = BBox(0.1, 0.1, 0.7, 0.7)
    t = det.assign_targets([GroundTruth([small, big_same_cell, large], [0, 1, 2])], CFG)
    assert t.dropped == 1 and t.n_pos == 2
    assert t.cls[Level.P3][0, 2, 2] == 1  # larger area wins
    assert t.box_w[Level.P3].sum() == 1 and t.box_w[Level.P4].sum() == 1
    with pytest.raises(ContractError):
        det.assign_targets([GroundTruth([small], [3])], CFG, seen_classes={0, 1})


def saturated_outputs(gts, cfg, mag=20.0):
    """Raw outputs whose logits are one-hot correct at ``mag`` and whose offsets are exact."""
    t = det.assign_targets(gts, cfg)
    K1 = cfg.num_classes + 1
    raw = {}
    for lvl in det.LEVELS:
        cls = t.cls[lvl]
        N, S, _ = cls.shape
        out = np.zeros((N, K1 + 4, S, S))
        out[:, :K1] = -mag
        onehot = np.eye(K1)[cls].transpose(0, 3, 1, 2)
        out[:, :K1] += 2 * mag * onehot
        out[:, K1:] = t.box[lvl].transpose(0, 3, 1, 2)
        raw[lvl] = Var(out)
    return raw, t


def test_saturated_loss_vanishes():
    gts = [GroundTruth([BBox(0.1, 0.1, 0.3, 0.25), BBox(0.3, 0.2, 0.9, 0.9)], [1, 2])]
    raw, t = saturated_outputs(gts, CFG)
    loss = det.detection_loss(Tape(), raw, t, CFG.num_classes)
    assert 0.0 <= float(loss.data) < 1e-3


def test_empty_image_is_pure_background_ce():
    t = det.assign_targets([GroundTruth([], [])], CFG)
    rng = np.random.default_rng(0)
    raw = {lvl: Var(rng.standard_normal((1, CFG.out_channels) + CFG.level_shape(lvl)[1:])) for lvl in det.LEVELS}
    loss = float(det.detection_loss(Tape(), raw, t, CFG.num_classes).data)
    expect = 0.0
    for lvl in det.LEVELS:
        z = raw[lvl].data[0, : CFG.num_classes + 1].reshape(CFG.num_classes + 1, -1)
        expect += np.sum(np.log(np.exp(z).sum(0)) - z[CFG.num_classes])
    assert loss == pytest.approx(expect, rel=1e-9)


def test_overfit_single_image():
    rng = np.random.default_rng(0)
    p = det.init_detector(CFG, np.random.default_rng(1))
    img = rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
    gts = [GroundTruth([BBox(0.1, 0.1, 0.3, 0.3), BBox(0.4, 0.3, 0.95, 0.9)], [0, 3])]
    t = det.assign_targets(gts, CFG)
    opt = Adam(lr=3e-3)
    losses = []
    for _ in range(200):
        tape = Tape()
        b = tape.bind(p)
        raw, _ = det.forward(tape, b, Var(img), CFG)
        loss = det.detection_loss(tape, raw, t, CFG.num_classes)
        losses.append(float(loss.data))
        opt.step(p, backward(loss, tape, b))
    assert losses[-1] < 0.1 * losses[0]


def test_nms_fixtures():
    a = D((0.1, 0.1, 0.4, 0.4), score=0.9)
    assert det.nms([a, D((0.1, 0.1, 0.4, 0.4), score=0.8)]) == [a]
    far = D((0.6, 0.6, 0.9, 0.9), score=0.8)
    assert det.nms([a, far]) == [a, far]
    # chain: A-B IoU 5/7 (B suppressed), B-C overlap 1/11, A-C disjoint -> C survives
    A = D((0.0, 0.0, 0.3, 0.1), score=0.9)
    B = D((0.05, 0.0, 0.35, 0.1), score=0.8)
    C = D((0.3, 0.0, 0.6, 0.1), score=0.7)
    assert det.nms([C, B, A]) == [A, C]
    # other classes never suppress each other
    assert len(det.nms([a, D((0.1, 0.1, 0.4, 0.4), cls=1, score=0.8)])) == 2


def test_decode_threshold():
    K1 = CFG.num_classes + 1
    out = {Level.P3: np.full((K1 + 4, 8, 8), -10.0), Level.P4: np.full((K1 + 4, 4, 4), -10.0)}
    out[Level.P3][CFG.num_classes] = 10.0
    out[Level.P4][CFG.num_classes] = 10.0
    out[Level.P3][2, 3, 4] = 10.0
    out[Level.P3][CFG.num_classes, 3, 4] = -10.0
    dets = det.decode_and_nms(out, CFG.num_classes)
    assert len(dets) == 1 and dets[0].cls == 2 and dets[0].score > 0.99
    assert det.decode_and_nms(out, CFG.num_classes, allowed={0}) == []


G1 = [GroundTruth([BBox(0.1, 0.1, 0.4, 0.4)], [0])]


def test_map_fixtures():
    tp, fp = D((0.1, 0.1, 0.4, 0.4), score=0.9), D((0.6, 0.6, 0.9, 0.9), score=0.8)
    assert det.evaluate_map([[tp]], G1).mAP == 1.0
    assert det.evaluate_map([[]], G1).mAP == 0.0
    assert det.evaluate_map([[tp, fp]], G1).mAP == 1.0
    tp.score, fp.score = 0.8, 0.9
    assert det.evaluate_map([[tp, fp]], G1).mAP == 0.5


def test_map_two_gt_envelope():
    # TP .9, FP .8, TP .7 on 2 GT: P/R = (1, .5), (.5, .5), (2/3, 1) -> AP = .5 + .5 * 2/3
    g = [GroundTruth([BBox(0.1, 0.1, 0.3, 0.3), BBox(0.6, 0.6, 0.8, 0.8)], [0, 0])]
    dets = [[D((0.1, 0.1, 0.3, 0.3), score=0.9), D((0.3, 0.6, 0.5, 0.8), score=0.8),
             D((0.6, 0.6, 0.8, 0.8), score=0.7)]]
    assert det.evaluate_map(dets, g).mAP == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)


def test_duplicates_match_once():
    dets = [[D((0.1, 0.1, 0.4, 0.4), score=0.9), D((0.1, 0.1, 0.4, 0.4), score=0.8)]]
    r = det.evaluate_map(dets, G1)
    assert r.mAP == 1.0  # the duplicate is an FP after full recall
    assert det.average_precision(np.array([1.0, 0.0]), 1) == 1.0
    assert det.average_precision(np.array([]), 3) == 0.0


def test_map_invariant_to_monotone_score_transform():
    rng = np.random.default_rng(0)
    gts, dets = [], []
    for _ in range(10):
        boxes = [BBox.from_center(*rng.uniform(0.2, 0.8, 2), 0.2, 0.2) for _ in range(2)]
        gts.append(GroundTruth(boxes, [0, 1]))
        ds = []
        for b in boxes:
            j = rng.uniform(-0.05, 0.05, 4)
            ds.append(det.Detection(BBox(*np.clip(np.array(b.as_tuple()) + j, 0, 1)), int(rng.integers(2)),
                                    float(rng.uniform())))
        dets.append(ds)
    base = det.evaluate_map(dets, gts).mAP
    for d in (x for ds in dets for x in ds):
        d.score = math.exp(3 * d.score) / 30
    assert det.evaluate_map(dets, gts).mAP == base
