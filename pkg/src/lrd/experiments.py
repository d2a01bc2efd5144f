"""Experiment grids and ablations built on the trainer.

Runs are keyed by a hash of everything that determines them, so a grid that
is asked for twice (e.g. by two acceptance criteria) trains each run once
when a cache directory is given.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detector as det
from .autodiff import Adam, Tape, Var, backward
from .compression import (
    CompressorConfig,
    FiLMParams,
    Level,
    decode,
    encode,
    film_coeffs,
    init_compressor,
    new_film_params,
    pca_fit,
    random_projection,
    reconstruction_error,
)
from .data import SyntheticConfig, TaskData, generate_sequence, stack_images
from .memory import ReplayAugConfig, capacity, record_size
from .sampling import Candidate, SamplingConfig, fps_iou, mean_pairwise_distance, random_select
from .trainer import (
    VARIANTS,
    LossWeights,
    RunRecord,
    TrainConfig,
    Variant,
    get_variant,
    pyramid_features,
    run_sequence,
    train_task,
    init_state,
)

log = logging.getLogger(__name__)

GRID_VARIANTS = ("finetune", "lrd", "lrd-taskadaptive", "lrd-spatialdiverse", "lrd-both")


def extra_variant(name: str) -> Variant:
    """Named variants plus ablation extras ``comp-<kind>`` and ``samp-<method>``."""
    if name in VARIANTS:
        return VARIANTS[name]
    if name.startswith("comp-"):
        return Variant(name, compression=name[5:])
    if name.startswith("samp-"):
        return Variant(name, sampling=name[5:])
    return get_variant(name)


@dataclass
class RunSpec:
    variant: str
    seed: int
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    weights: LossWeights = field(default_factory=LossWeights)
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    aug: ReplayAugConfig = field(default_factory=ReplayAugConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)  # method comes from the variant

    def sampling_config(self) -> SamplingConfig:
        return replace(self.sampling, method=extra_variant(self.variant).sampling_method)

    def key(self) -> str:
        blob = json.dumps(
            {"v": asdict(extra_variant(self.variant)), "seed": self.seed, "train": asdict(self.train),
             "w": asdict(self.weights), "synth": asdict(self.synth), "aug": asdict(self.aug),
             "samp": asdict(self.sampling_config())},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_TASKS: dict[str, list[TaskData]] = {}


def _tasks_for(synth: SyntheticConfig) -> list[TaskData]:
    k = json.dumps(asdict(synth), sort_keys=True)
    if k not in _TASKS:
        _TASKS[k] = generate_sequence(synth)
    return _TASKS[k]


def execute(spec: RunSpec, tasks: list[TaskData] | None = None):
    """Train one (variant, seed) run; returns (RunRecord, final RunState)."""
    return run_sequence(tasks if tasks is not None else _tasks_for(spec.synth), extra_variant(spec.variant),
                        spec.train, spec.seed, weights=spec.weights, aug=spec.aug, sampling=spec.sampling_config())


def _execute_cached(args) -> str:
    spec, cache_dir = args
    path = Path(cache_dir) / f"{spec.variant}_{spec.seed}_{spec.key()}.json" if cache_dir else None
    if path is not None and path.exists():
        return path.read_text()
    text = execute(spec)[0].to_json()
    if path is not None:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
    return text


def run_grid(specs: list[RunSpec], cache_dir=None, jobs: int = 1) -> dict[tuple[str, int], RunRecord]:
    """Run (or load) every spec; runs are independent so ``jobs`` > 1 uses processes."""
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    args = [(s, cache_dir) for s in specs]
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            texts = list(ex.map(_execute_cached, args))
    else:
        texts = []
        for a in args:
            log.info("run %s seed %d", a[0].variant, a[0].seed)
            texts.append(_execute_cached(a))
    return {(s.variant, s.seed): RunRecord.from_json(t) for s, t in zip(specs, texts)}


def main_grid(seeds=(42, 123, 456), variants=GRID_VARIANTS, cache_dir=None, jobs: int = 1, **kw):
    return run_grid([RunSpec(v, s, **kw) for v in variants for s in seeds], cache_dir, jobs)


def aggregate(records: dict[tuple[str, int], RunRecord], keys=("final_map", "forgetting", "bwt", "loc_drift")):
    """Per variant: {metric: (mean, std)} over seeds, in first-seen variant order."""
    by_var: dict[str, list[RunRecord]] = {}
    for (v, _), r in records.items():
        by_var.setdefault(v, []).append(r)
    out = {}
    for v, recs in by_var.items():
        out[v] = {}
        for k in keys:
            vals = np.array([r.summary[k] for r in recs], dtype=np.float64)
            out[v][k] = (float(vals.mean()), float(vals.std()))
        out[v]["n"] = len(recs)
    return out


# -- compression ablation ------------------------------------------------------
@dataclass
class CompressionAblation:
    """Held-out reconstruction MSE per method, one row per seed."""

    methods: tuple[str, ...]
    errors: list[dict[str, float]]

    def mean(self) -> dict[str, float]:
        return {m: float(np.mean([e[m] for e in self.errors])) for m in self.methods}


def task_feature_sets(seed: int, synth: SyntheticConfig | None = None, n_train: int = 200, n_test: int = 60,
                      cfg: TrainConfig | None = None):
    """P3 features of every task from a detector trained on task 0 (then frozen, as in the replay runs).

    Returns per-task (train, test) arrays of shape (N, C, H, W).
    """
    synth = synth or SyntheticConfig(n_train=n_train, n_test=n_test)
    tasks = _tasks_for(synth)
    cfg = cfg or TrainConfig.desk()
    state = init_state(get_variant("finetune"), cfg, seed, n_tasks=len(tasks),
                       det_cfg=det.DetectorConfig(num_classes=sum(len(t.classes) for t in tasks)))
    train_task(state, tasks[0], tasks[:1], RunRecord("features", seed))
    out = []
    for td in tasks:
        tr = pyramid_features(state, stack_images(td.train))[Level.P3]
        te = pyramid_features(state, stack_images(td.test))[Level.P3]
        out.append((tr, te))
    return out


def _pool(X: np.ndarray) -> np.ndarray:
    N, C, H, W = X.shape
    return X.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5)).reshape(N, -1)


def _train_autoencoder(feats, seed: int, film: bool, steps: int, batch: int = 64, lr: float = 3e-3):
    """Fit the shared P3 compressor/decoder on every task, with or without per-task FiLM.

    Tasks alternate step by step; the step size follows a cosine decay to zero.
    """
    C, H, W = feats[0][0].shape[1:]
    comp_cfg = CompressorConfig({Level.P3: (C, H, W)}, 32, 64)
    params = init_compressor(comp_cfg, np.random.default_rng([seed, 1]))
    if film:
        for t in range(len(feats)):
            fp = new_film_params(np.random.default_rng([seed, 3, t]), {Level.P3: C})
            params.update(FiLMParams(t, fp).prefixed())
    rng = np.random.default_rng([seed, 5])
    opt = Adam(lr=lr)
    T = len(feats)
    for step in range(steps):
        opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        t = step % T
        X = feats[t][0]
        idx = rng.choice(len(X), size=min(batch, len(X)), replace=False)
        tape = Tape()
        b = tape.bind(params)
        F = Var(X[idx])
        mod = film_coeffs(tape, b, t, Level.P3)[:2] if film else None
        rec = decode(tape, b, Level.P3, encode(tape, b, Level.P3, F, mod), (C, H, W))
        opt.step(params, backward(tape.mse(rec, F), tape, b))
    return params


def _ae_error(params, feats, film: bool) -> float:
    C, H, W = feats[0][1].shape[1:]
    errs = []
    for t, (_, X) in enumerate(feats):
        tape = Tape()
        b = {k: Var(v) for k, v in params.items()}
        mod = film_coeffs(tape, b, t, Level.P3)[:2] if film else None
        rec = decode(tape, b, Level.P3, encode(tape, b, Level.P3, Var(X), mod), (C, H, W))
        errs.append(reconstruction_error(X, rec.data))
    return float(np.mean(errs))


def compression_ablation(seeds=(42, 123, 456), steps: int = 4000, d: int = 32, **kw) -> CompressionAblation:
    """Task-adaptive AE vs FiLM-free AE vs PCA vs random projection on held-out per-task features."""
    methods = ("task_adaptive", "no_film", "pca", "random")
    rows = []
    for seed in seeds:
        feats = task_feature_sets(seed, **kw)
        row = {}
        for name, film in (("task_adaptive", True), ("no_film", False)):
            row[name] = _ae_error(_train_autoencoder(feats, seed, film, steps), feats, film)
        C, H, W = feats[0][0].shape[1:]
        pooled_train = np.concatenate([_pool(tr) for tr, _ in feats])
        for name, proj in (("pca", pca_fit(pooled_train, d, seed=seed)),
                           ("random", random_projection(pooled_train.shape[1], d, seed=seed))):
            errs = []
            for _, te in feats:
                rec = proj.reconstruct(_pool(te)).reshape(len(te), C, H // 2, W // 2)
                rec = np.repeat(np.repeat(rec, 2, -2), 2, -1)
                errs.append(reconstruction_error(te, rec))
            row[name] = float(np.mean(errs))
        rows.append(row)
    return CompressionAblation(methods, rows)


# -- buffer capacity and sampling diversity ------------------------------------
def capacity_table(dims=(16, 32, 64, 128), budget: int = 65536) -> list[dict]:
    return [{"latent_dim": d, "record_bytes": record_size(d), "capacity": capacity(budget, d)} for d in dims]


def diversity_fixture(seed: int = 7, n: int = 60):
    """Single-class candidates spread over the three scale buckets (FPS vs random fixture)."""
    from .core import BBox

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        lo, hi = [(0.05, 0.15), (0.2, 0.35), (0.42, 0.6)][i % 3]
        w, h = rng.uniform(lo, hi, 2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        out.append(Candidate.make(i, BBox(x, y, x + w, y + h), 0))
    return out


def fps_vs_random(seeds=range(20), k: int = 10, fixture=None) -> list[tuple[float, float]]:
    """(FPS, random) mean pairwise 1-IoU per seed."""
    c = fixture if fixture is not None else diversity_fixture()
    return [
        (mean_pairwise_distance([c[i] for i in fps_iou(c, k, seed=s)]),
         mean_pairwise_distance([c[i] for i in random_select(c, k, s)]))
        for s in seeds
    ]
