import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrd.autodiff import Adam, ParamSet, Tape, Var, backward
from lrd.compression import (
    CompressorConfig,
    FeatureMap,
    FiLMParams,
    Level,
    TaskSimilarityMatrix,
    compress,
    decode,
    decompress,
    encode,
    init_compressor,
    init_task_params,
    new_film_params,
    pca_fit,
    random_projection,
    reconstruction_error,
    task_similarity,
)
from lrd.core import ContractError

SHAPES = {Level.P3: (16, 8, 8), Level.P4: (48, 4, 4)}


def setup(seed=0):
    cfg = CompressorConfig(SHAPES)
    theta = init_compressor(cfg, np.random.default_rng(seed))
    return cfg, theta


def identity_film(t, chans):
    p = new_film_params(np.random.default_rng(t), chans)
    for k in p:
        if not k.endswith("emb"):
            p[k][...] = 0.0  # gamma residual 0 -> gamma = 1, beta = 0
    return FiLMParams(t, p)


def test_ratios_match_configuration():
    cfg = CompressorConfig(SHAPES)
    assert cfg.input_dim(Level.P3) / cfg.latent_dim == 8.0
    assert cfg.input_dim(Level.P4) / cfg.latent_dim == 6.0
    with pytest.raises(ContractError):
        CompressorConfig(SHAPES, latent_dim=40)
    with pytest.raises(ContractError):
        CompressorConfig({Level.P3: (2, 4, 4)}, latent_dim=8)


def test_film_identity_reduces_to_plain_compressor():
    _, theta = setup()
    chans = {lvl: s[0] for lvl, s in SHAPES.items()}
    f = FeatureMap(Level.P3, np.random.default_rng(1).standard_normal(SHAPES[Level.P3]).astype(np.float32))
    plain = compress(f, None, theta).values
    a = compress(f, identity_film(1, chans), theta).values
    b = compress(f, identity_film(2, chans), theta).values
    assert np.array_equal(a, b)
    assert np.allclose(a, plain, atol=1e-6)


def test_zero_map_zero_latent():
    _, theta = setup()
    f = FeatureMap(Level.P4, np.zeros(SHAPES[Level.P4], np.float32))
    assert np.array_equal(compress(f, None, theta).values, np.zeros(32))


def test_distinct_embeddings_give_distinct_latents():
    _, theta = setup()
    chans = {lvl: s[0] for lvl, s in SHAPES.items()}
    f = FeatureMap(Level.P3, np.random.default_rng(2).uniform(0, 1, SHAPES[Level.P3]).astype(np.float32))
    t1 = FiLMParams(1, new_film_params(np.random.default_rng(1), chans, scale=1.0))
    t2 = FiLMParams(2, new_film_params(np.random.default_rng(2), chans, scale=1.0))
    assert not np.allclose(compress(f, t1, theta).values, compress(f, t2, theta).values)


def test_compress_errors():
    cfg = CompressorConfig({Level.P3: SHAPES[Level.P3]})
    theta = init_compressor(cfg, np.random.default_rng(0))
    with pytest.raises(ContractError):
        compress(FeatureMap(Level.P4, np.zeros(SHAPES[Level.P4], np.float32)), None, theta)
    tape = Tape()
    bound = {k: Var(v) for k, v in theta.items()}
    with pytest.raises(ContractError):
        encode(tape, bound, Level.P3, Var(np.zeros((1, 8, 8, 8), np.float32)))
    with pytest.raises(ContractError):
        decode(tape, bound, Level.P3, Var(np.zeros((1, 31), np.float32)), SHAPES[Level.P3])


def test_decompress_shape_and_zero():
    _, theta = setup()
    from lrd.compression import LatentVector

    out = decompress(LatentVector(np.zeros(32, np.float32), Level.P3, 0), theta, SHAPES[Level.P3])
    assert out.tensor.shape == SHAPES[Level.P3]
    assert np.array_equal(out.tensor, np.zeros(SHAPES[Level.P3]))


def test_training_reduces_held_out_error():
    rng = np.random.default_rng(0)
    cfg = CompressorConfig({Level.P3: SHAPES[Level.P3]})
    theta = init_compressor(cfg, np.random.default_rng(1))
    # low-rank features: 6 factors drive 256 pooled values
    basis = rng.standard_normal((6, 16, 4, 4))

    def draw(n):
        small = np.einsum("nk,kchw->nchw", rng.standard_normal((n, 6)), basis)
        return np.repeat(np.repeat(small, 2, -2), 2, -1).astype(np.float32)

    train, test = draw(256), draw(64)

    def err(p):
        t = Tape()
        b = {k: Var(v) for k, v in p.items()}
        return float(t.mse(decode(t, b, Level.P3, encode(t, b, Level.P3, Var(test)), SHAPES[Level.P3]), Var(test)).data)

    before = err(theta)
    opt = Adam(lr=3e-3)
    for step in range(300):
        x = train[(step * 32) % 256 :][:32]
        t = Tape()
        b = t.bind(theta)
        rec = decode(t, b, Level.P3, encode(t, b, Level.P3, Var(x)), SHAPES[Level.P3])
        opt.step(theta, backward(t.mse(rec, Var(x)), t, b))
    assert err(theta) < 0.5 * before


def test_init_task_params_fixtures():
    chans = {Level.P3: 4}
    new = new_film_params(np.random.default_rng(0), chans)
    S = np.zeros((3, 3))
    assert all(np.array_equal(v, new[k]) for k, v in init_task_params(0, S, [], new).items())
    prev0 = new_film_params(np.random.default_rng(1), chans, scale=1.0)
    zero_new = new.scaled(0.0)
    S[1, 0] = 1.0
    out = init_task_params(1, S, [prev0], zero_new)
    assert all(np.array_equal(out[k], prev0[k]) for k in out)
    prev1 = new_film_params(np.random.default_rng(2), chans, scale=1.0)
    S[2, :2] = 0.5
    out = init_task_params(2, S, [prev0, prev1], new)
    for k in out:
        expect = (new[k] + np.float32(0.5) * prev0[k]).astype(np.float32)
        expect = (expect + np.float32(0.5) * prev1[k]).astype(np.float32)
        assert np.allclose(out[k], expect, atol=1e-7)


def test_init_task_params_errors():
    chans = {Level.P3: 4}
    new = new_film_params(np.random.default_rng(0), chans)
    with pytest.raises(ContractError):
        init_task_params(2, np.ones((3, 3)), [new], new)
    other = new_film_params(np.random.default_rng(0), {Level.P4: 4})
    with pytest.raises(ContractError):
        init_task_params(1, np.ones((2, 2)), [other], new)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.sampled_from([0.0, 0.25, 0.5]), min_size=1, max_size=3))
def test_blending_is_linear(seed, weights):
    # blending scaled copies of one theta equals theta times the weight sum
    chans = {Level.P3: 4}
    theta = new_film_params(np.random.default_rng(seed), chans, scale=1.0)
    t = len(weights)
    S = np.zeros((t + 1, t + 1))
    S[t, :t] = weights
    out = init_task_params(t, S, [theta] * t, theta.scaled(0.0))
    for k in out:
        expect = np.zeros_like(theta[k])
        for w in weights:
            if w:
                expect = (expect + np.float32(w) * theta[k]).astype(np.float32)
        assert np.array_equal(out[k], expect)


def test_task_similarity_fixtures():
    assert task_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    assert task_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert task_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2))
    assert task_similarity([1.0, 0.0], [-1.0, 0.0]) == 0.0
    assert task_similarity([0.0, 0.0], [1.0, 0.0]) == 0.0


def test_similarity_matrix_symmetric():
    m = TaskSimilarityMatrix(3)
    rng = np.random.default_rng(0)
    for t in range(3):
        m.update(t, rng.uniform(0, 1, 5))
    assert np.allclose(m.S, m.S.T) and np.all(np.diag(m.S) == 1.0)
    assert np.all((m.S >= 0) & (m.S <= 1))
    assert m.blend_row(2)[:2].sum() <= 1.0 + 1e-12


def test_pca_line():
    rng = np.random.default_rng(0)
    u = np.array([3.0, 4.0]) / 5
    X = rng.standard_normal((200, 1)) * u + 0.001 * rng.standard_normal((200, 2))
    p = pca_fit(X, 1)
    assert abs(p.W[:, 0] @ u) > 0.999


def test_pca_orthonormal_and_errors():
    X = np.random.default_rng(1).standard_normal((300, 20))
    p = pca_fit(X, 5)
    assert np.allclose(p.W.T @ p.W, np.eye(5), atol=1e-4)
    with pytest.raises(ContractError):
        pca_fit(X[:3], 5)


def test_random_projection_deterministic():
    a, b = random_projection(40, 8, seed=3), random_projection(40, 8, seed=3)
    assert np.array_equal(a.W, b.W)
    assert abs(a.W.std() * math.sqrt(40) - 1.0) < 0.1


def test_pca_beats_random_projection():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((400, 10)) @ rng.standard_normal((10, 60)) + 0.1 * rng.standard_normal((400, 60))
        tr, te = X[:300], X[300:]
        e_pca = reconstruction_error(te, pca_fit(tr, 8, seed).reconstruct(te))
        e_rnd = reconstruction_error(te, random_projection(60, 8, seed).reconstruct(te))
        assert e_pca <= e_rnd


def test_reconstruction_error_zero_iff_exact():
    X = np.arange(6.0).reshape(2, 3)
    assert reconstruction_error(X, X) == 0.0
    assert reconstruction_error(X, X + 1e-3) > 0.0
