"""Gradient-check cases for every differentiable primitive and composite loss.

Each case builds a scalar loss from named float64 parameters on a fresh tape,
so :func:`lrd.autodiff.grad_check` can compare the analytic gradient with
central differences. Inputs are drawn away from the kinks of relu, abs and
the Huber corner so a 1e-3 step never straddles one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import detector as det
from .autodiff import GradReport, ParamSet, Tape, Var, backward, grad_check, relative_error
from .compression import new_film_params
from .core import BBox, GroundTruth, grid_cell, scale_bucket
from .memory import LatentRecord

LossFn = Callable[[Tape, dict[str, Var]], Var]


@dataclass
class Case:
    name: str
    loss: LossFn
    params: ParamSet
    max_coords: int | None = None


def _away(rng, shape, margin=0.05):
    """Normal draws pushed at least ``margin`` away from zero."""
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def _proj(rng, shape):
    # fixed random projection that turns any tensor into a well-conditioned scalar
    w = rng.standard_normal(shape)
    return lambda tape, v: tape.sum(tape.mul(v, Var(w)))


def primitive_cases(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []

    def add(name, loss, **arrays):
        cases.append(Case(name, loss, ParamSet({k: np.asarray(v, np.float64) for k, v in arrays.items()})))

    P = _proj(rng, (3, 4))
    add("add", lambda t, b: P(t, t.add(b["a"], b["b"])), a=rng.standard_normal((3, 4)), b=rng.standard_normal((3, 4)))
    add("sub", lambda t, b: P(t, t.sub(b["a"], b["b"])), a=rng.standard_normal((3, 4)), b=rng.standard_normal((3, 4)))
    add("mul", lambda t, b: P(t, t.mul(b["a"], b["b"])), a=rng.standard_normal((3, 4)), b=rng.standard_normal((3, 4)))
    add("scale", lambda t, b: P(t, t.scale(b["a"], -1.7)), a=rng.standard_normal((3, 4)))
    add("add_scalar", lambda t, b: t.sumsq(t.add_scalar(b["a"], 0.3)), a=rng.standard_normal((3, 4)))
    add("relu", lambda t, b: P(t, t.relu(b["a"])), a=_away(rng, (3, 4)))
    P6 = _proj(rng, (4, 3))
    add("transpose", lambda t, b: P6(t, t.transpose(b["a"], (1, 0))), a=rng.standard_normal((3, 4)))
    P12 = _proj(rng, (12,))
    add("reshape", lambda t, b: P12(t, t.reshape(b["a"], (12,))), a=rng.standard_normal((3, 4)))
    P32 = _proj(rng, (3, 2))
    add("slice_cols", lambda t, b: P32(t, t.slice_cols(b["a"], 1, 3)), a=rng.standard_normal((3, 4)))
    P54 = _proj(rng, (5, 4))
    idx = np.array([2, 0, 2, 1, 0])
    add("index", lambda t, b: P54(t, t.index(b["a"], idx)), a=rng.standard_normal((3, 4)))
    P_cat = _proj(rng, (3, 7))
    add("concat", lambda t, b: P_cat(t, t.concat([b["a"], b["b"]], axis=1)),
        a=rng.standard_normal((3, 4)), b=rng.standard_normal((3, 3)))
    P_lin = _proj(rng, (5, 3))
    add("linear", lambda t, b: P_lin(t, t.linear(b["x"], b["w"], b["b"])),
        x=rng.standard_normal((5, 4)), w=rng.standard_normal((4, 3)), b=rng.standard_normal(3))
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        H = 6
        Ho = (H + 2 * pad - 3) // stride + 1
        Pc = _proj(rng, (2, 4, Ho, Ho))
        add(f"conv2d_s{stride}p{pad}", lambda t, b, Pc=Pc, s=stride, p=pad: Pc(t, t.conv2d(b["x"], b["k"], b["b"], s, p)),
            x=rng.standard_normal((2, 3, H, H)), k=rng.standard_normal((4, 3, 3, 3)), b=rng.standard_normal(4))
    Pp = _proj(rng, (2, 3, 2, 2))
    add("avgpool", lambda t, b: Pp(t, t.avgpool(b["x"], 2)), x=rng.standard_normal((2, 3, 4, 4)))
    Pu = _proj(rng, (2, 3, 4, 4))
    add("upsample", lambda t, b: Pu(t, t.upsample(b["x"], 2)), x=rng.standard_normal((2, 3, 2, 2)))
    Pf = _proj(rng, (2, 3, 4, 4))
    add("film_shared", lambda t, b: Pf(t, t.film(b["x"], b["g"], b["b"])),
        x=rng.standard_normal((2, 3, 4, 4)), g=rng.standard_normal(3), b=rng.standard_normal(3))
    add("film_per_sample", lambda t, b: Pf(t, t.film(b["x"], b["g"], b["b"])),
        x=rng.standard_normal((2, 3, 4, 4)), g=rng.standard_normal((2, 3)), b=rng.standard_normal((2, 3)))
    add("sum", lambda t, b: t.sumsq(t.add_scalar(t.sum(b["a"]), 0.5)), a=rng.standard_normal((3, 4)))
    add("mean", lambda t, b: t.sumsq(t.add_scalar(t.mean(b["a"]), 0.5)), a=rng.standard_normal((3, 4)))
    add("sumsq", lambda t, b: t.sumsq(b["a"]), a=rng.standard_normal((3, 4)))
    add("mse", lambda t, b: t.mse(b["a"], b["b"]), a=rng.standard_normal((3, 4)), b=rng.standard_normal((3, 4)))
    hard = rng.integers(0, 5, size=6)
    soft = rng.dirichlet(np.ones(5), size=6)
    w = rng.uniform(0.0, 2.0, size=6)
    add("softmax_ce", lambda t, b: t.softmax_ce(b["z"], hard), z=rng.standard_normal((6, 5)) * 2)
    add("softmax_ce_soft", lambda t, b: t.softmax_ce(b["z"], soft), z=rng.standard_normal((6, 5)) * 2)
    add("softmax_ce_weighted", lambda t, b: t.softmax_ce(b["z"], hard, weight=w), z=rng.standard_normal((6, 5)) * 2)
    # keep |pred - target| clear of 0 and of the quadratic/linear corner at beta = 1
    target = rng.standard_normal((6, 4))
    mag = rng.choice([rng.uniform(0.05, 0.9), rng.uniform(1.1, 3.0)], size=(6, 4))
    pred = target + rng.choice([-1.0, 1.0], size=(6, 4)) * mag
    bw = rng.uniform(0.0, 1.0, size=(6, 1))
    add("smooth_l1", lambda t, b: t.smooth_l1(b["p"], target, weight=bw), p=pred)
    add("weighted_sum", lambda t, b: t.weighted_sum([(0.7, t.sumsq(b["a"])), (0.0, t.sum(b["b"])), (-2.0, t.sum(b["b"]))]),
        a=rng.standard_normal((3, 4)), b=rng.standard_normal((3, 4)))
    return cases


# -- composite losses on a miniature detector -----------------------------------------
def tiny_state(seed: int):
    """A small LRD run state (32 px images, narrow channels) for composite checks."""
    from .trainer import TrainConfig, get_variant, init_state

    dcfg = det.DetectorConfig(num_classes=4, image_size=32, channels=(4, 4, 4), p4_channels=12)
    cfg = TrainConfig(latent_dim=8, hidden=8, budget_bytes=4096)
    state = init_state(get_variant("lrd"), cfg, seed, det_cfg=dcfg)
    chans = {lvl: dcfg.level_shape(lvl)[0] for lvl in det.LEVELS}
    film = new_film_params(np.random.default_rng([seed, 9]), chans, scale=1.0)
    state.params.update({f"film/t0/{k}": v for k, v in film.items()})
    return state


def _scene(rng, n, num_classes):
    gts = []
    for _ in range(n):
        boxes, labels = [], []
        for side in (rng.uniform(0.1, 0.2), rng.uniform(0.45, 0.6)):
            x, y = rng.uniform(0, 1 - side, 2)
            boxes.append(BBox(x, y, x + side, y + side))
            labels.append(int(rng.integers(num_classes)))
        gts.append(GroundTruth(boxes, labels))
    return gts


def composite_cases(seed: int, max_coords: int = 3) -> list[Case]:
    from .trainer import distill_loss, replay_loss, taskreg_loss, film_residuals

    rng = np.random.default_rng([seed, 77])
    state = tiny_state(seed)
    dcfg = state.det_cfg
    params = state.params.astype(np.float64)
    images = rng.uniform(0, 1, (2, 3, dcfg.image_size, dcfg.image_size))
    gts = _scene(rng, 2, dcfg.num_classes)
    targets = det.assign_targets(gts, dcfg)
    records = []
    for g in _scene(rng, 3, dcfg.num_classes):
        for b, y in zip(g.boxes, g.labels):
            records.append(LatentRecord(rng.standard_normal(state.bank.d), y, b, 0, grid_cell(b, 3), scale_bucket(b)))

    def pick(prefixes):
        return ParamSet({k: v for k, v in params.items() if k.split("/")[0] in prefixes})

    def detection(t, b):
        raw, _ = det.forward(t, b, Var(images), dcfg)
        return det.detection_loss(t, raw, targets, dcfg.num_classes)

    def replay(t, b):
        return replay_loss(t, b, state, records)

    def distill(t, b):
        feats = det.backbone_forward(t, b, Var(images), dcfg)
        return distill_loss(t, b, feats, 0)

    def taskreg(t, b):
        return taskreg_loss(t, film_residuals(t, b, 0, det.LEVELS))

    return [
        Case("detection_loss", detection, pick({"backbone", "neck", "head"}), max_coords),
        Case("replay_loss", replay, pick({"head", "dec"}), max_coords),
        Case("distill_loss", distill, pick({"backbone", "neck", "comp", "dec", "film"}), max_coords),
        Case("taskreg_loss", taskreg, pick({"film"}), max_coords),
    ]


class _PatternTape(Tape):
    """Tape that also records the on/off pattern of every relu it evaluates."""

    def __init__(self):
        super().__init__()
        self.patterns = []

    def relu(self, x: Var) -> Var:
        self.patterns.append(x.data > 0)
        return super().relu(x)


def _pattern(loss: LossFn, params: ParamSet):
    t = _PatternTape()
    val = float(loss(t, {k: Var(v) for k, v in params.items()}).data)
    return val, t.patterns


def kink_safe_check(case: Case, tolerance: float = 1e-3, h: float = 1e-3, seed: int = 0) -> GradReport:
    """Central differences restricted to coordinates whose +-h stencil keeps every relu on the same side.

    Finite differences only approximate the derivative where the function is
    smooth over the stencil; a coordinate whose perturbation flips some relu
    is skipped and another is drawn. ``case.max_coords`` safe coordinates are
    probed per tensor (all of them when None).
    """
    p64 = case.params.astype(np.float64)
    tape = Tape()
    bound = tape.bind(p64)
    analytic = backward(case.loss(tape, bound), tape, bound)
    _, base = _pattern(case.loss, p64)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in p64.items():
        flat = arr.reshape(-1)
        want = flat.size if case.max_coords is None else min(case.max_coords, flat.size)
        idx, num = [], []
        for i in rng.permutation(flat.size):
            if len(idx) == want:
                break
            old = flat[i]
            flat[i] = old + h
            fp, pp = _pattern(case.loss, p64)
            flat[i] = old - h
            fm, pm = _pattern(case.loss, p64)
            flat[i] = old
            if all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(base, pp, pm)):
                idx.append(i)
                num.append((fp - fm) / (2 * h))
        if idx:
            errors[name] = relative_error(analytic[name].reshape(-1)[idx], np.array(num))
    return GradReport(errors, tolerance)


def run_checks(seeds, tolerance: float = 1e-3, composites: bool = True) -> dict[str, GradReport]:
    """Worst report per case name over ``seeds``."""
    worst: dict[str, GradReport] = {}
    for s in seeds:
        cases = primitive_cases(s) + (composite_cases(s) if composites else [])
        for c in cases:
            if c.name.endswith("_loss"):
                r = kink_safe_check(c, tolerance, seed=s)
            else:
                r = grad_check(c.loss, c.params, tolerance=tolerance, max_coords=c.max_coords, seed=s)
            if c.name not in worst or r.max_error > worst[c.name].max_error:
                worst[c.name] = r
    return worst
