"""Task-conditioned feature compressor and decoder.

Per pyramid level the encoder is 2x2 average pool -> FiLM -> flatten ->
linear -> relu -> linear, and the decoder mirrors it back up to the
level's C x H x W shape. FiLM coefficients come from a per-task 16-dim
embedding pushed through two small linear maps; the multiplicative term is
parameterised as ``1 + residual`` so a freshly blended task starts close to
the identity modulation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamSet, Tape, Var, he_uniform
from .core import ContractError


class Level(str, enum.Enum):
    P3 = "P3"
    P4 = "P4"
    P5 = "P5"


# spatial side relative to P3
LEVEL_STRIDE = {Level.P3: 1, Level.P4: 2, Level.P5: 4}
DEFAULT_RATIOS = {Level.P3: 8.0, Level.P4: 6.0, Level.P5: 4.0}
EMB_DIM = 16
NEW_TASK_SCALE = 0.1


@dataclass
class FeatureMap:
    level: Level
    tensor: np.ndarray  # C x H x W

    def __post_init__(self):
        self.level = Level(self.level)
        if self.tensor.ndim != 3:
            raise ContractError(f"feature map must be C x H x W, got {self.tensor.shape}")


@dataclass
class LatentVector:
    values: np.ndarray
    level: Level
    task: int


@dataclass
class CompressorConfig:
    """Per-level input shapes (C, H, W), shared latent size and target ratios."""

    shapes: dict[Level, tuple[int, int, int]]
    latent_dim: int = 32
    hidden: int = 64
    ratios: dict[Level, float] | None = None

    def __post_init__(self):
        self.shapes = {Level(k): tuple(v) for k, v in self.shapes.items()}
        if self.ratios is None:
            self.ratios = {lvl: DEFAULT_RATIOS[lvl] for lvl in self.shapes}
        self.ratios = {Level(k): float(v) for k, v in self.ratios.items()}
        for lvl in self.shapes:
            D = self.input_dim(lvl)
            if not self.latent_dim < D:
                raise ContractError(f"{lvl.value}: latent dim {self.latent_dim} must be < input dim {D}")
            if round(D / self.ratios[lvl]) != self.latent_dim:
                raise ContractError(
                    f"{lvl.value}: D/d = {D}/{self.latent_dim} does not match ratio {self.ratios[lvl]}:1"
                )

    @classmethod
    def free_ratio(cls, shapes, latent_dim: int, hidden: int = 64) -> "CompressorConfig":
        """Config whose ratios are whatever D/d works out to (latent-dim sweeps)."""
        shapes = {Level(k): tuple(v) for k, v in shapes.items()}
        ratios = {lvl: (c * (h // 2) * (w // 2)) / latent_dim for lvl, (c, h, w) in shapes.items()}
        return cls(shapes, latent_dim, hidden, ratios)

    def input_dim(self, level: Level) -> int:
        c, h, w = self.shapes[Level(level)]
        return c * (h // 2) * (w // 2)


def init_compressor(cfg: CompressorConfig, rng: np.random.Generator) -> ParamSet:
    """Encoder ('comp/...') and decoder ('dec/...') weights for every level."""
    p = ParamSet()
    d, hdn = cfg.latent_dim, cfg.hidden
    for lvl in cfg.shapes:
        D = cfg.input_dim(lvl)
        L = lvl.value
        p[f"comp/{L}/w1"] = he_uniform(rng, (D, hdn), D)
        p[f"comp/{L}/b1"] = np.zeros(hdn, np.float32)
        p[f"comp/{L}/w2"] = he_uniform(rng, (hdn, d), hdn)
        p[f"comp/{L}/b2"] = np.zeros(d, np.float32)
        p[f"dec/{L}/w1"] = he_uniform(rng, (d, hdn), d)
        p[f"dec/{L}/b1"] = np.zeros(hdn, np.float32)
        p[f"dec/{L}/w2"] = he_uniform(rng, (hdn, D), hdn)
        p[f"dec/{L}/b2"] = np.zeros(D, np.float32)
    return p


# -- FiLM ----------------------------------------------------------------------
@dataclass
class FiLMParams:
    """Task-relative FiLM parameters: ``emb`` plus ``<level>/{gw,gb,bw,bb}``."""

    task_id: int
    params: ParamSet = field(default_factory=ParamSet)

    def prefixed(self) -> ParamSet:
        return ParamSet({f"film/t{self.task_id}/{k}": v for k, v in self.params.items()})

    @classmethod
    def from_prefixed(cls, task_id: int, params: ParamSet) -> "FiLMParams":
        pre = f"film/t{task_id}/"
        sub = ParamSet({k[len(pre):]: v for k, v in params.items() if k.startswith(pre)})
        if not sub:
            raise ContractError(f"no FiLM parameters for task {task_id}")
        return cls(task_id, sub)


def new_film_params(rng: np.random.Generator, channels: dict[Level, int], scale: float = NEW_TASK_SCALE) -> ParamSet:
    """Fresh small-scale FiLM parameters (the 'new' term of the blend)."""
    p = ParamSet()
    p["emb"] = he_uniform(rng, (EMB_DIM,), EMB_DIM, scale)
    for lvl, c in channels.items():
        L = Level(lvl).value
        p[f"{L}/gw"] = he_uniform(rng, (EMB_DIM, c), EMB_DIM, scale)
        p[f"{L}/gb"] = np.zeros(c, np.float32)
        p[f"{L}/bw"] = he_uniform(rng, (EMB_DIM, c), EMB_DIM, scale)
        p[f"{L}/bb"] = np.zeros(c, np.float32)
    return p


def init_task_params(t: int, S: np.ndarray, previous: list[ParamSet], new: ParamSet) -> ParamSet:
    """theta_t = sum_{i<t} S[t, i] * theta_i + theta_new (theta_0 = theta_new)."""
    if len(previous) < t:
        raise ContractError(f"task {t} needs parameters for {t} previous tasks, got {len(previous)}")
    out = new.copy()
    for i in range(t):
        w = float(S[t, i])
        if w == 0.0:
            continue
        prev = previous[i]
        missing = set(out) - set(prev)
        if missing:
            raise ContractError(f"previous task {i} lacks parameters {sorted(missing)}")
        for k in out:
            out[k] = (out[k] + w * prev[k]).astype(np.float32)
    return out


def film_coeffs(tape: Tape, bound: dict[str, Var], task: int, level: Level) -> tuple[Var, Var, Var]:
    """Return (gamma, beta, gamma_residual), each of shape (C,)."""
    pre = f"film/t{task}/"
    L = Level(level).value
    emb = tape.reshape(bound[pre + "emb"], (1, EMB_DIM))
    g_res = tape.linear(emb, bound[f"{pre}{L}/gw"], bound[f"{pre}{L}/gb"])
    beta = tape.linear(emb, bound[f"{pre}{L}/bw"], bound[f"{pre}{L}/bb"])
    c = g_res.shape[1]
    g_res = tape.reshape(g_res, (c,))
    return tape.add_scalar(g_res, 1.0), tape.reshape(beta, (c,)), g_res


def film_modulate(tape: Tape, x: Var, gamma: Var, beta: Var) -> Var:
    return tape.film(x, gamma, beta)


# -- encoder / decoder -----------------------------------------------------------
def encode(tape: Tape, bound: dict[str, Var], level: Level, F: Var, film: tuple[Var, Var] | None = None) -> Var:
    """Batched compression: F (N, C, H, W) -> z (N, d)."""
    L = Level(level).value
    if f"comp/{L}/w1" not in bound:
        raise ContractError(f"no compressor configured for level {L}")
    pooled = tape.avgpool(F, 2)
    if film is not None:
        pooled = tape.film(pooled, film[0], film[1])
    n = F.shape[0]
    flat = tape.reshape(pooled, (n, -1))
    if flat.shape[1] != bound[f"comp/{L}/w1"].shape[0]:
        raise ContractError(f"{L}: feature dim {flat.shape[1]} != compressor input {bound[f'comp/{L}/w1'].shape[0]}")
    h = tape.relu(tape.linear(flat, bound[f"comp/{L}/w1"], bound[f"comp/{L}/b1"]))
    return tape.linear(h, bound[f"comp/{L}/w2"], bound[f"comp/{L}/b2"])


def decode(tape: Tape, bound: dict[str, Var], level: Level, z: Var, shape: tuple[int, int, int]) -> Var:
    """Batched reconstruction: z (N, d) -> F_hat (N, C, H, W)."""
    L = Level(level).value
    if z.shape[1] != bound[f"dec/{L}/w1"].shape[0]:
        raise ContractError(f"{L}: latent length {z.shape[1]} != decoder input {bound[f'dec/{L}/w1'].shape[0]}")
    c, hh, ww = shape
    h = tape.relu(tape.linear(z, bound[f"dec/{L}/w1"], bound[f"dec/{L}/b1"]))
    flat = tape.linear(h, bound[f"dec/{L}/w2"], bound[f"dec/{L}/b2"])
    small = tape.reshape(flat, (z.shape[0], c, hh // 2, ww // 2))
    return tape.upsample(small, 2)


def _bind_consts(params: ParamSet) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.items()}


def compress(f: FeatureMap, task: FiLMParams | None, theta: ParamSet) -> LatentVector:
    """Single-map convenience wrapper around :func:`encode` (no gradients)."""
    tape = Tape()
    all_params = ParamSet(theta)
    film = None
    tid = -1
    if task is not None:
        all_params.update(task.prefixed())
        bound = _bind_consts(all_params)
        g, b, _ = film_coeffs(tape, bound, task.task_id, f.level)
        film = (g, b)
        tid = task.task_id
    else:
        bound = _bind_consts(all_params)
    x = Var(f.tensor[None].astype(np.float32))
    z = encode(tape, bound, f.level, x, film)
    return LatentVector(z.data[0].copy(), f.level, tid)


def decompress(z: LatentVector, psi: ParamSet, shape: tuple[int, int, int]) -> FeatureMap:
    tape = Tape()
    out = decode(tape, _bind_consts(psi), z.level, Var(z.values[None].astype(np.float32)), shape)
    return FeatureMap(z.level, out.data[0])


# -- task similarity ---------------------------------------------------------------
def task_similarity(stats_i: np.ndarray, stats_j: np.ndarray) -> float:
    """Cosine of mean-feature vectors clamped to [0, 1]; 0 for zero vectors."""
    a = np.asarray(stats_i, dtype=np.float64).ravel()
    b = np.asarray(stats_j, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(min(max(a @ b / (na * nb), 0.0), 1.0))


class TaskSimilarityMatrix:
    def __init__(self, n_tasks: int):
        self.S = np.eye(n_tasks)
        self.stats: dict[int, np.ndarray] = {}

    def update(self, t: int, stats: np.ndarray) -> None:
        self.stats[t] = np.asarray(stats, dtype=np.float64)
        for i, s in self.stats.items():
            if i != t:
                self.S[t, i] = self.S[i, t] = task_similarity(stats, s)

    def blend_row(self, t: int) -> np.ndarray:
        """Row t over previous tasks, rescaled so the weights sum to at most 1."""
        row = np.zeros(self.S.shape[0])
        row[:t] = self.S[t, :t]
        total = row.sum()
        return row / total if total > 1.0 else row


# -- fixed linear baselines ----------------------------------------------------------
@dataclass
class Projection:
    """Linear code z = W^T (x - mean), reconstruction x_hat = mean + R z."""

    W: np.ndarray  # D x d
    mean: np.ndarray  # D
    R: np.ndarray  # D x d
    kind: str

    def encode(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, np.float64) - self.mean) @ self.W

    def decode(self, Z: np.ndarray) -> np.ndarray:
        return self.mean + np.asarray(Z, np.float64) @ self.R.T

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(X))


def pca_fit(features: np.ndarray, d: int, seed: int = 0, max_samples: int = 2048, iters: int = 300) -> Projection:
    """Top-d principal axes by subspace power iteration on the sample covariance."""
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(len(X), -1)
    n, D = X.shape
    if n < d:
        raise ContractError(f"PCA needs at least {d} samples, got {n}")
    rng = np.random.default_rng(seed)
    if n > max_samples:
        X = X[np.sort(rng.choice(n, max_samples, replace=False))]
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / max(len(Xc) - 1, 1)
    Q, _ = np.linalg.qr(rng.standard_normal((D, d)))
    for _ in range(iters):
        Q, _ = np.linalg.qr(C @ Q)
    # Rayleigh-Ritz to order the converged subspace by variance
    evals, evecs = np.linalg.eigh(Q.T @ C @ Q)
    Q = Q @ evecs[:, ::-1]
    return Projection(Q, mean, Q.copy(), "pca")


def random_projection(D: int, d: int, seed: int = 0) -> Projection:
    """Gaussian projection scaled to unit-variance outputs, decoded by pseudo-inverse."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((D, d)) / math.sqrt(D)
    R = np.linalg.pinv(W.T)
    return Projection(W, np.zeros(D), R, "random")


def reconstruction_error(X: np.ndarray, X_hat: np.ndarray) -> float:
    X = np.asarray(X, np.float64)
    return float(np.mean((X - np.asarray(X_hat, np.float64)) ** 2))
