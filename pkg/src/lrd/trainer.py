"""Sequential task training with latent replay.

One optimisation step combines

    L = L_det + w_replay * L_replay + w_distill * L_distill + w_taskreg * L_taskreg

where L_replay runs the detection head on decoded buffer latents (injected at
the pyramid stage), L_distill is the reconstruction error of the current
pyramid features through the compressor/decoder pair, and L_taskreg is the
squared norm of the current task's FiLM outputs. After the last epoch of a
task its exemplars are selected, compressed and merged into the buffer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import detector as det
from .autodiff import Adam, ParamSet, Tape, Var, backward
from .compression import (
    CompressorConfig,
    FiLMParams,
    Level,
    Projection,
    TaskSimilarityMatrix,
    decode,
    encode,
    film_coeffs,
    init_compressor,
    init_task_params,
    new_film_params,
    pca_fit,
    random_projection,
)
from .core import ContractError, GroundTruth, grid_cell
from .data import TaskData, stack_images
from .memory import (
    BinaryMask,
    LatentRecord,
    MemoryBank,
    ReplayAugConfig,
    grid_importance,
    insert,
    record_size,
    sample_replay_batch,
)
from .metrics import summarize
from .sampling import SamplingConfig, build_candidates, select_exemplars

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    replay: float = 1.0
    distill: float = 0.5
    taskreg: float = 0.3
    consistency: float = 0.0

    def __post_init__(self):
        if min(self.replay, self.distill, self.taskreg, self.consistency) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 15
    replay_ratio: float = 0.5
    seeds: tuple[int, ...] = (42, 123, 456)
    budget_bytes: int = 65536
    latent_dim: int = 32
    hidden: int = 64
    log_every: int = 10
    # learning-rate multipliers applied from the second task on; 0 freezes the group
    backbone_lr_scale: float = 0.0  # backbone and neck, i.e. everything below the replay layer
    codec_lr_scale: float = 0.0  # shared compressor encoder and decoder (FiLM stays trainable)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Desk-scale preset: 15 epochs instead of 50, so the step size is raised to 1e-3."""
        return cls(**{"lr": 1e-3, **kw})

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ContractError("lr, batch_size and epochs must be positive")
        if min(self.backbone_lr_scale, self.codec_lr_scale) < 0:
            raise ContractError("learning-rate scales must be non-negative")
        if not 0.0 <= self.replay_ratio <= 1.0:
            raise ContractError("replay_ratio must lie in [0, 1]")
        if record_size(self.latent_dim) > self.budget_bytes:
            raise ContractError(
                f"budget_bytes={self.budget_bytes} is below one record size ({record_size(self.latent_dim)} bytes)"
            )


@dataclass(frozen=True)
class Variant:
    name: str
    replay: bool = True
    film: bool = True
    spatial: bool = True
    compression: str = "learned"  # learned | pca | random | none
    sampling: str | None = None  # override for sampling ablations

    @property
    def sampling_method(self) -> str:
        if self.sampling is not None:
            return self.sampling
        return "spatial" if self.spatial else "random"


VARIANTS = {
    "finetune": Variant("finetune", replay=False, film=False, spatial=False),
    "lrd": Variant("lrd"),
    "lrd-taskadaptive": Variant("lrd-taskadaptive", film=False),
    "lrd-spatialdiverse": Variant("lrd-spatialdiverse", spatial=False),
    "lrd-both": Variant("lrd-both", film=False, spatial=False),
}


def get_variant(name: str) -> Variant:
    if name in VARIANTS:
        return VARIANTS[name]
    # ablation extras: comp-<kind>, samp-<method>, dim-<d> are handled by the CLI
    raise ContractError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}")


@dataclass
class RunRecord:
    variant: str
    seed: int
    R: list[list[float]] = field(default_factory=list)
    iou: list[list[float | None]] = field(default_factory=list)
    ref: list[float] = field(default_factory=list)
    losses: dict[str, list[float]] = field(default_factory=dict)
    buffer: list[dict] = field(default_factory=list)
    dropped_targets: int = 0
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


@dataclass
class RunState:
    params: ParamSet
    opt: Adam
    bank: MemoryBank
    sim: TaskSimilarityMatrix
    det_cfg: det.DetectorConfig
    comp_cfg: CompressorConfig
    variant: Variant
    cfg: TrainConfig
    weights: LossWeights
    aug: ReplayAugConfig
    sampling: SamplingConfig
    seed: int
    film_history: list[ParamSet] = field(default_factory=list)
    projections: dict[Level, Projection] | None = None
    next_task: int = 0
    step: int = 0


def default_compressor_config(det_cfg: det.DetectorConfig, latent_dim: int = 32, hidden: int = 64) -> CompressorConfig:
    shapes = {lvl: det_cfg.level_shape(lvl) for lvl in det.LEVELS}
    try:
        return CompressorConfig(shapes, latent_dim, hidden)
    except ContractError:
        return CompressorConfig.free_ratio(shapes, latent_dim, hidden)


def lr_scales(cfg: TrainConfig, t: int) -> dict[str, float] | None:
    """Per-prefix learning-rate multipliers for task ``t`` (None on the first task)."""
    if t == 0:
        return None
    b, c = cfg.backbone_lr_scale, cfg.codec_lr_scale
    return {"backbone": b, "neck": b, "comp": c, "dec": c}


def init_state(
    variant: Variant,
    cfg: TrainConfig,
    seed: int,
    det_cfg: det.DetectorConfig | None = None,
    weights: LossWeights | None = None,
    aug: ReplayAugConfig | None = None,
    sampling: SamplingConfig | None = None,
    n_tasks: int = 5,
) -> RunState:
    det_cfg = det_cfg or det.DetectorConfig()
    comp_cfg = default_compressor_config(det_cfg, cfg.latent_dim, cfg.hidden)
    if variant.compression == "none":
        d = max(comp_cfg.input_dim(lvl) for lvl in det.LEVELS)
    else:
        d = cfg.latent_dim
    params = det.init_detector(det_cfg, np.random.default_rng([seed, 0]))
    params.update(init_compressor(comp_cfg, np.random.default_rng([seed, 1])))
    return RunState(
        params=params,
        opt=Adam(lr=cfg.lr),
        bank=MemoryBank(d, cfg.budget_bytes),
        sim=TaskSimilarityMatrix(n_tasks),
        det_cfg=det_cfg,
        comp_cfg=comp_cfg,
        variant=variant,
        cfg=cfg,
        weights=weights or LossWeights(),
        aug=aug or ReplayAugConfig(),
        sampling=sampling or SamplingConfig(method=variant.sampling_method),
        seed=seed,
    )


# -- loss pieces ---------------------------------------------------------------------
def replay_level(rec: LatentRecord) -> Level:
    return det.level_for(rec.bbox)


def _decoded_features(tape, bound, state: RunState, lvl: Level, Z: np.ndarray) -> Var:
    shape = state.det_cfg.level_shape(lvl)
    kind = state.variant.compression
    if kind == "learned":
        return decode(tape, bound, lvl, Var(Z.astype(np.float32)), shape)
    c, h, w = shape
    D = c * (h // 2) * (w // 2)
    if kind == "none":
        pooled = Z[:, :D]
    else:
        pooled = state.projections[lvl].decode(Z[:, : state.projections[lvl].W.shape[1]])
    small = pooled.reshape(len(Z), c, h // 2, w // 2).astype(np.float32)
    return Var(np.repeat(np.repeat(small, 2, axis=-2), 2, axis=-1))


def replay_loss(tape: Tape, bound: dict[str, Var], state: RunState, records: list[LatentRecord], rng=None) -> Var:
    """Detection loss of the head on decoded latents, summed over the sampled records."""
    if not records:
        return Var(np.asarray(0.0, dtype=np.float32))
    K1 = state.det_cfg.num_classes + 1
    bg = state.det_cfg.num_classes
    terms = []
    for lvl in det.LEVELS:
        group = [r for r in records if replay_level(r) == lvl]
        if not group:
            continue
        Z = np.stack([r.z for r in group]).astype(np.float64)
        gts = [GroundTruth([r.bbox], [r.cls]) for r in group]
        targets = _record_targets(gts, state, lvl)
        if state.aug.mixup and len(group) > 1 and rng is not None:
            perm = np.roll(np.arange(len(group)), 1)
            lams = rng.beta(state.aug.mixup_alpha, state.aug.mixup_alpha, size=len(group))
            Z = lams[:, None] * Z + (1 - lams[:, None]) * Z[perm]
            targets = _mixup_targets(targets, lvl, perm, lams, K1, bg)
        F = _decoded_features(tape, bound, state, lvl, Z)
        if state.aug.cutmix and len(group) > 1 and rng is not None:
            F, targets = _cutmix_batch(tape, F, gts, state, lvl, rng)
        raw = det.head_forward(tape, bound, {lvl: F})
        loss = det.detection_loss(tape, raw, targets, state.det_cfg.num_classes)
        # detection_loss is normalised by positives; undo it so the result sums over records
        terms.append((max(1.0, targets.n_pos), loss))
    return tape.weighted_sum(terms)


def _record_targets(gts, state: RunState, lvl: Level) -> det.TargetAssignment:
    # A latent covers the whole source image but its record labels one object,
    # so the other cells are unlabelled: classify only at labelled cells.
    t = det.assign_targets(gts, state.det_cfg, levels=(lvl,))
    t.cls_w = {lvl: t.box_w[lvl].copy()}
    return t


def _mixup_targets(t: det.TargetAssignment, lvl, perm, lams, K1, bg) -> det.TargetAssignment:
    cls = t.cls[lvl]
    N, S, _ = cls.shape
    one = np.eye(K1)[cls]  # N,S,S,K1
    soft = lams[:, None, None, None] * one + (1 - lams[:, None, None, None]) * one[perm]
    w = lams[:, None, None] * t.box_w[lvl] + (1 - lams[:, None, None]) * t.box_w[lvl][perm]
    box = np.where(t.box_w[lvl][..., None] > 0, t.box[lvl], t.box[lvl][perm])
    cw = np.maximum(t.cls_w[lvl], t.cls_w[lvl][perm]) if t.cls_w is not None else None
    return det.TargetAssignment({lvl: cls}, {lvl: soft}, {lvl: box}, {lvl: w}, t.n_pos, t.dropped, {lvl: cw})


def _cutmix_batch(tape, F: Var, gts, state: RunState, lvl, rng):
    """Pair each decoded map with its neighbour under a random rectangular mask."""
    N, C, H, W = F.shape
    masks = np.zeros((N, 1, H, W), F.data.dtype)
    new_gts = []
    for i in range(N):
        j = (i + 1) % N
        m = BinaryMask.random(H, W, rng)
        masks[i, 0] = m.m
        from .memory import spatial_cutmix

        _, kept = spatial_cutmix(
            np.zeros((H, W)), np.zeros((H, W)), m,
            list(zip(gts[i].boxes, gts[i].labels)), list(zip(gts[j].boxes, gts[j].labels)),
        )
        new_gts.append(GroundTruth([b for b, _ in kept], [y for _, y in kept]))
    perm = np.roll(np.arange(N), -1)
    Mv = Var(np.broadcast_to(masks, F.shape).copy())
    Fj = tape.index(F, perm)
    mixed = tape.add(tape.mul(Mv, F), tape.mul(Var(1 - Mv.data), Fj))
    return mixed, _record_targets(new_gts, state, lvl)


def reconstruct(tape: Tape, bound: dict[str, Var], feats: dict[Level, Var], task: int | None) -> dict[Level, Var]:
    """Round trip every pyramid level through compressor and decoder."""
    out = {}
    for lvl, F in feats.items():
        film = None
        if task is not None:
            g, b, _ = film_coeffs(tape, bound, task, lvl)
            film = (g, b)
        out[lvl] = decode(tape, bound, lvl, encode(tape, bound, lvl, F, film), F.shape[1:])
    return out


def distill_loss(
    tape: Tape, bound: dict[str, Var], feats: dict[Level, Var], task: int | None,
    recon: dict[Level, Var] | None = None,
) -> Var:
    """Mean squared reconstruction error of pyramid features.

    Gradients reach the backbone through both the target and the encoder
    input, so the features themselves are pushed toward compressibility.
    """
    recon = recon if recon is not None else reconstruct(tape, bound, feats, task)
    return tape.weighted_sum([(1.0 / len(feats), tape.mse(recon[lvl], F)) for lvl, F in feats.items()])


def taskreg_loss(tape: Tape, coeffs: list[tuple[Var, Var]]) -> Var:
    """Sum of squared FiLM values over the supplied (gamma, beta) pairs."""
    terms = []
    for g, b in coeffs:
        terms.append((1.0, tape.sumsq(g)))
        terms.append((1.0, tape.sumsq(b)))
    if not terms:
        return Var(np.asarray(0.0, dtype=np.float32))
    return tape.weighted_sum(terms)


def film_residuals(tape, bound, task: int, levels) -> list[tuple[Var, Var]]:
    out = []
    for lvl in levels:
        _, beta, g_res = film_coeffs(tape, bound, task, lvl)
        out.append((g_res, beta))
    return out


def step_losses(
    tape: Tape,
    bound: dict[str, Var],
    state: RunState,
    images: np.ndarray,
    gts: list[GroundTruth],
    replay_records: list[LatentRecord],
    task: int,
    rng=None,
) -> dict[str, Var]:
    """Every loss component for one batch, plus their weighted total."""
    raw, feats = det.forward(tape, bound, Var(images), state.det_cfg)
    targets = det.assign_targets(gts, state.det_cfg)
    comps = {"det": det.detection_loss(tape, raw, targets, state.det_cfg.num_classes)}
    zero = Var(np.asarray(0.0, dtype=images.dtype))
    v = state.variant
    film_task = task if v.film else None
    w = state.weights
    if v.replay and v.compression == "learned":
        recon = reconstruct(tape, bound, feats, film_task)
        comps["distill"] = distill_loss(tape, bound, feats, film_task, recon)
        if w.consistency > 0:
            raw_h = det.head_forward(tape, bound, recon)
            comps["consistency"] = det.detection_loss(tape, raw_h, targets, state.det_cfg.num_classes)
    else:
        comps["distill"] = zero
    comps["replay"] = replay_loss(tape, bound, state, replay_records, rng) if v.replay else zero
    if v.replay and v.film:
        comps["taskreg"] = taskreg_loss(tape, film_residuals(tape, bound, task, det.LEVELS))
    else:
        comps["taskreg"] = zero
    comps.setdefault("consistency", zero)
    comps["total"] = tape.weighted_sum(
        [(1.0, comps["det"]), (w.replay, comps["replay"]), (w.distill, comps["distill"]), (w.taskreg, comps["taskreg"]),
         (w.consistency, comps["consistency"])]
    )
    comps["_dropped"] = targets.dropped
    return comps


# -- per-task pieces -------------------------------------------------------------------
def _const_bind(params: ParamSet) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.items()}


def pyramid_features(state: RunState, images: np.ndarray, batch: int = 100) -> dict[Level, np.ndarray]:
    out: dict[Level, list] = {lvl: [] for lvl in det.LEVELS}
    bound = _const_bind(state.params)
    for s in range(0, len(images), batch):
        feats = det.backbone_forward(Tape(), bound, Var(images[s : s + batch]), state.det_cfg)
        for lvl in det.LEVELS:
            out[lvl].append(feats[lvl].data)
    return {lvl: np.concatenate(v) for lvl, v in out.items()}


def task_statistics(feats: dict[Level, np.ndarray]) -> np.ndarray:
    return np.concatenate([feats[lvl].mean(axis=(0, 2, 3), dtype=np.float64) for lvl in det.LEVELS])


def _channels(state: RunState) -> dict[Level, int]:
    return {lvl: state.det_cfg.level_shape(lvl)[0] for lvl in det.LEVELS}


def start_task(state: RunState, td: TaskData, images: np.ndarray) -> None:
    t = td.task_id
    feats = pyramid_features(state, images)
    state.sim.update(t, task_statistics(feats))
    v = state.variant
    if v.film:
        new = new_film_params(np.random.default_rng([state.seed, 3, t]), _channels(state))
        S = np.zeros_like(state.sim.S)
        S[t] = state.sim.blend_row(t)
        theta = init_task_params(t, S, state.film_history, new)
        state.params.update(FiLMParams(t, theta).prefixed())
    if v.replay and v.compression in ("pca", "random") and state.projections is None:
        state.projections = {}
        for lvl in det.LEVELS:
            X = feats[lvl]
            N, C, H, W = X.shape
            pooled = X.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5)).reshape(N, -1)
            if v.compression == "pca":
                state.projections[lvl] = pca_fit(pooled, state.bank.d, seed=state.seed)
            else:
                state.projections[lvl] = random_projection(pooled.shape[1], state.bank.d, seed=state.seed)


def _encode_exemplars(state: RunState, td: TaskData, chosen) -> list[LatentRecord]:
    t = td.task_id
    v = state.variant
    by_sample: dict[int, list] = {}
    for c in chosen:
        by_sample.setdefault(c.index, []).append(c)
    idx = sorted(by_sample)
    if not idx:
        return []
    images = stack_images([td.train[i] for i in idx])
    feats = pyramid_features(state, images)
    pos = {i: p for p, i in enumerate(idx)}
    records = []
    bound = _const_bind(state.params)
    latents: dict[Level, np.ndarray] = {}
    for lvl in det.LEVELS:
        X = feats[lvl]
        if v.compression == "learned":
            tape = Tape()
            film = None
            if v.film:
                g, b, _ = film_coeffs(tape, bound, t, lvl)
                film = (g, b)
            latents[lvl] = encode(tape, bound, lvl, Var(X), film).data
        else:
            N, C, H, W = X.shape
            pooled = X.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5)).reshape(N, -1)
            if v.compression == "none":
                z = np.zeros((N, state.bank.d), np.float32)
                z[:, : pooled.shape[1]] = pooled
                latents[lvl] = z
            else:
                latents[lvl] = state.projections[lvl].encode(pooled).astype(np.float32)
    for c in chosen:
        lvl = det.level_for(c.bbox)
        z = latents[lvl][pos[c.index]]
        records.append(LatentRecord(z, c.cls, c.bbox, t, grid_cell(c.bbox, state.sampling.grid), c.scale))
    return records


def _herding_features(state: RunState, td: TaskData) -> np.ndarray:
    cands = build_candidates(td.train, state.sampling.grid)
    feats = pyramid_features(state, stack_images(td.train))
    img_feat = np.concatenate([feats[lvl].mean(axis=(2, 3)) for lvl in det.LEVELS], axis=1)
    return img_feat[[c.index for c in cands]]


def evaluate_tasks(state: RunState, tasks: list[TaskData], params: ParamSet | None = None):
    params = params if params is not None else state.params
    maps, ious = [], []
    for td in tasks:
        images = stack_images(td.test)
        dets = det.predict(params, images, state.det_cfg)
        res = det.evaluate_map(dets, [s.gt for s in td.test], classes=td.classes)
        maps.append(res.mAP)
        ious.append(res.matched_iou)
    return maps, ious


def train_task(state: RunState, td: TaskData, all_tasks: list[TaskData], record: RunRecord) -> RunRecord:
    """Train on one task, refresh the buffer and append a row to ``record``."""
    t = td.task_id
    if t != state.next_task:
        raise ContractError(f"tasks must be trained in order: expected {state.next_task}, got {t}")
    cfg, v = state.cfg, state.variant
    images = stack_images(td.train)
    gts = [s.gt for s in td.train]
    start_task(state, td, images)
    order_rng = np.random.default_rng([state.seed, 1, t])
    replay_rng = np.random.default_rng([state.seed, 2, t])
    aug_rng = np.random.default_rng([state.seed, 4, t])
    n_replay = int(round(cfg.replay_ratio * cfg.batch_size))
    importance = None
    if v.replay and v.spatial and state.aug.importance and len(state.bank):
        imp = grid_importance([r.bbox for r in state.bank.records], state.sampling.grid)
        importance = imp / imp.max() if imp.max() > 0 else imp
    trace = {k: [] for k in ("det", "replay", "distill", "taskreg", "consistency", "total")}
    acc = {k: 0.0 for k in trace}
    n_acc = 0
    n = len(images)
    for _epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            bi = order[s : s + cfg.batch_size]
            replay = []
            if v.replay and len(state.bank) and n_replay > 0:
                replay, _ = sample_replay_batch(
                    state.bank, min(n_replay, len(state.bank)), importance, replay_rng, state.aug.temperature
                )
            tape = Tape()
            bound = tape.bind(state.params)
            comps = step_losses(tape, bound, state, images[bi], [gts[i] for i in bi], replay, t, aug_rng)
            record.dropped_targets += comps.pop("_dropped")
            grads = backward(comps["total"], tape, bound)
            state.opt.step(state.params, grads, lr_scales(cfg, t))
            state.step += 1
            for k in trace:
                acc[k] += float(comps[k].data)
            n_acc += 1
            if n_acc == cfg.log_every:
                for k in trace:
                    trace[k].append(acc[k] / n_acc)
                    acc[k] = 0.0
                n_acc = 0
    if n_acc:
        for k in trace:
            trace[k].append(acc[k] / n_acc)
    for k, vals in trace.items():
        record.losses.setdefault(k, []).extend(vals)

    if v.replay:
        feats = _herding_features(state, td) if state.sampling.method == "herding" else None
        chosen = select_exemplars(td.train, state.sampling, seed=state.seed * 100 + t, features=feats)
        recs = _encode_exemplars(state, td, chosen)
        policy = "spatial" if v.spatial else "random"
        state.bank = insert(state.bank, recs, policy=policy, seed=state.seed * 100 + t)
        if state.bank.size_bytes > state.bank.budget_bytes:
            raise AssertionError("buffer exceeded its byte budget")
    if v.film:
        state.film_history.append(FiLMParams.from_prefixed(t, state.params).params.copy())
    state.next_task += 1

    maps, ious = evaluate_tasks(state, all_tasks)
    record.R.append(maps)
    record.iou.append(ious)
    record.buffer.append(
        {
            "task": t,
            "records": len(state.bank),
            "bytes": state.bank.size_bytes,
            "per_task": {str(k): c for k, c in state.bank.per_task().items()},
        }
    )
    log.info("%s seed=%d task=%d mAP=%s", v.name, state.seed, t, [round(m, 3) for m in maps[: t + 1]])
    return record


def run_sequence(
    tasks: list[TaskData],
    variant: Variant | str,
    cfg: TrainConfig,
    seed: int,
    det_cfg: det.DetectorConfig | None = None,
    weights: LossWeights | None = None,
    aug: ReplayAugConfig | None = None,
    sampling: SamplingConfig | None = None,
) -> tuple[RunRecord, RunState]:
    variant = get_variant(variant) if isinstance(variant, str) else variant
    det_cfg = det_cfg or det.DetectorConfig(num_classes=sum(len(td.classes) for td in tasks))
    state = init_state(variant, cfg, seed, det_cfg, weights, aug, sampling, n_tasks=len(tasks))
    record = RunRecord(variant.name, seed)
    record.config = {
        "variant": asdict(variant),
        "train": asdict(cfg),
        "weights": asdict(state.weights),
        "aug": asdict(state.aug),
        "sampling": asdict(state.sampling),
        "n_tasks": len(tasks),
    }
    record.ref, _ = evaluate_tasks(state, tasks)
    for td in tasks:
        train_task(state, td, tasks, record)
    T = len(tasks)
    record.summary = summarize(record.R, record.ref, record.iou)
    record.summary["buffer_records"] = len(state.bank)
    record.summary["T"] = T
    return record, state
