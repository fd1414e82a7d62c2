import math

import numpy as np
import pytest
from scipy import stats

from metatne.errors import CheckpointError, NumericalError, SamplingError
from metatne.graph import Graph
from metatne.structural import (
    EmbeddingMatrix,
    NoiseDistribution,
    build_noise,
    draw_negatives,
    init_embeddings,
    load_embeddings,
    save_embeddings,
    sample_edge_batch,
    sgns_loss_and_grads,
    sgns_step,
)
from oracles import central_difference, rel_error


def test_init_bounds_and_determinism():
    a = init_embeddings(3, 4, seed=7)
    b = init_embeddings(3, 4, seed=7)
    assert a.center.shape == (3, 4) and a.context.shape == (3, 4)
    assert np.all(np.abs(a.center) <= 0.125)
    assert not a.context.any()
    assert np.array_equal(a.center, b.center)
    assert not np.array_equal(a.center, init_embeddings(3, 4, seed=8).center)
    with pytest.raises(ValueError):
        init_embeddings(3, 0, seed=0)


def test_noise_path_graph(path_graph):
    noise = build_noise(path_graph, exponent=1.0)
    np.testing.assert_allclose(noise.probs, [0.25, 0.5, 0.25], atol=1e-15)


def test_noise_fractional_exponent(path_graph):
    noise = build_noise(path_graph, exponent=0.75)
    w = [1.0, math.pow(2.0, 0.75), 1.0]
    want = [v / sum(w) for v in w]
    np.testing.assert_allclose(noise.probs, want, atol=1e-12)
    np.testing.assert_allclose(noise.probs, [0.2716, 0.4568, 0.2716], atol=1e-4)


def test_noise_uniform_fallback():
    noise = NoiseDistribution(np.zeros(2), 0.75)
    np.testing.assert_allclose(noise.probs, [0.5, 0.5])


def test_noise_sums_to_one_and_cumulative_monotone(rng):
    for _ in range(20):
        w = rng.integers(0, 50, size=rng.integers(1, 200)).astype(float) ** 0.75
        noise = NoiseDistribution(w, 0.75)
        assert abs(noise.probs.sum() - 1.0) < 1e-12
        assert np.all(np.diff(noise.cumulative) >= 0)


def test_alias_sampling_matches_probs(rng):
    noise = NoiseDistribution(np.array([1.0, 3.0, 0.0, 6.0]), 1.0)
    draws = noise.sample(rng, 100_000)
    counts = np.bincount(draws, minlength=4)
    assert counts[2] == 0
    _, p = stats.chisquare(counts[[0, 1, 3]], 100_000 * noise.probs[[0, 1, 3]])
    assert p > 1e-3


def test_single_edge_batch(rng):
    g = Graph.from_edges(2, [(0, 1)])
    pairs = sample_edge_batch(g, 4, rng)
    assert pairs.shape == (4, 2)
    assert all(tuple(p) in {(0, 1), (1, 0)} for p in pairs.tolist())


def test_triangle_pair_frequencies():
    g = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    pairs = sample_edge_batch(g, 60_000, np.random.default_rng(5))
    codes = pairs[:, 0] * 3 + pairs[:, 1]
    counts = np.array([np.sum(codes == c) for c in (1, 2, 3, 5, 6, 7)])
    assert counts.sum() == 60_000
    _, p = stats.chisquare(counts)
    assert p > 1e-3


def test_edgeless_graph_cannot_be_sampled(rng):
    with pytest.raises(SamplingError):
        sample_edge_batch(Graph.from_edges(3, []), 2, rng)


def test_negatives_avoid_true_neighbor(rng):
    noise = NoiseDistribution(np.array([1.0, 1.0]), 1.0)
    pairs = np.array([[1, 0]] * 500)
    negs = draw_negatives(noise, pairs, 3, rng)
    # each slot keeps a collision only after 9 straight hits (p = 2**-9)
    assert np.mean(negs == 0) < 0.02


def test_loss_at_zero_dot_is_two_ln2(rng):
    emb = init_embeddings(2, 4, seed=0)
    noise = NoiseDistribution(np.ones(2), 1.0)
    loss = sgns_step(emb, np.array([[0, 1]]), noise, 1, 0.1, rng)
    assert loss == pytest.approx(2 * math.log(2), abs=1e-12)
    assert loss == pytest.approx(1.3863, abs=1e-4)


def test_sgns_center_gradient_finite_differences(rng):
    d = 6
    emb = EmbeddingMatrix(rng.normal(size=(5, d)), rng.normal(size=(5, d)))
    pairs = np.array([[0, 1], [2, 3]])
    negs = np.array([[4, 2, 3], [1, 0, 4]])
    _, g_c, g_p, g_n = sgns_loss_and_grads(emb, pairs, negs)
    for b, (i, j) in enumerate(pairs):
        # per-pair loss as a function of u_i only
        def f(b=b):
            return float(sgns_loss_and_grads(emb, pairs[b:b + 1], negs[b:b + 1])[0][0])

        for k in range(d):
            num = central_difference(f, emb.center, (i, k))
            assert rel_error(num, g_c[b, k]) < 1e-5
        for k in range(d):
            num = central_difference(f, emb.context, (j, k))
            assert rel_error(num, g_p[b, k]) < 1e-5


def test_loss_positive_and_trending_down():
    rng = np.random.default_rng(3)
    emb = init_embeddings(6, 8, seed=3)
    emb.context[:] = rng.normal(scale=0.1, size=emb.context.shape)
    noise = NoiseDistribution(np.ones(6), 1.0)
    batch = np.array([[0, 1], [1, 2], [2, 0], [3, 4], [4, 5]])
    losses = [sgns_step(emb, batch, noise, 2, 0.1, rng) for _ in range(100)]
    assert min(losses) > 0
    assert losses[-1] < losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_two_cliques_cluster(two_cliques):
    rng = np.random.default_rng(0)
    emb = init_embeddings(two_cliques.node_count, 16, seed=0)
    noise = build_noise(two_cliques)
    for _ in range(1500):
        sgns_step(emb, sample_edge_batch(two_cliques, 16, rng), noise, 5, 0.05, rng)
    u = emb.center / np.linalg.norm(emb.center, axis=1, keepdims=True)
    cos = u @ u.T
    side = np.arange(10) < 5
    same = side[:, None] == side[None, :]
    off_diag = ~np.eye(10, dtype=bool)
    assert cos[same & off_diag].mean() > cos[~same].mean()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises(rng):
    emb = EmbeddingMatrix(np.full((2, 2), np.nan), np.ones((2, 2)))
    with pytest.raises(NumericalError):
        sgns_step(emb, np.array([[0, 1]]), NoiseDistribution(np.ones(2), 1.0), 1, 0.1, rng)


def test_checkpoint_roundtrip(tmp_path):
    emb = init_embeddings(7, 5, seed=1)
    emb.context[:] = 0.25
    path = tmp_path / "emb.bin"
    save_embeddings(path, emb, {"seed": 1})
    back = load_embeddings(path)
    np.testing.assert_array_equal(back.center, emb.center.astype(np.float32))
    np.testing.assert_array_equal(back.context, emb.context)
    assert "seed = 1" in (tmp_path / "emb.bin.cfg").read_text()
    raw = path.read_bytes()
    assert raw[:8] == b"MTNEEMB\x01"
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="'d'"):
        load_embeddings(path)
    path.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointError):
        load_embeddings(path)
