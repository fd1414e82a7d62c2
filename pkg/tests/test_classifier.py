import math

import numpy as np
import pytest

from metatne.classifier import (
    bce,
    episode_loss_and_grads,
    predict_prob,
    predict_tasks,
    prediction_loss_grads,
    prototype,
    task_loss,
)
from metatne.errors import NumericalError
from metatne.transform import TransformConfig, transform_set
from helpers import random_params, random_task
from oracles import central_difference, rel_error


def _at_distances(dp, dn):
    # one-dimensional vectors placed so the squared distances are dp and dn
    return predict_prob([math.sqrt(dp)], [0.0], [math.sqrt(dn)], [0.0])


def test_equidistant_is_half():
    assert _at_distances(2.0, 2.0).prob_positive == 0.5


def test_ln3_gap():
    p = _at_distances(0.0, math.log(3.0))
    assert p.prob_positive == pytest.approx(0.75, abs=1e-12)


def test_saturation_without_overflow():
    p = _at_distances(0.0, 50.0)
    assert math.isfinite(p.prob_positive)
    # 1 - 1e-20 rounds to 1.0 in double precision; check the complement instead
    assert 1.0 - p.prob_positive <= 1e-20
    assert 0.0 < p.prob_negative < 1e-20
    p = _at_distances(1e6, 0.0)
    assert p.prob_positive == 0.0 and p.prob_negative == 1.0


def test_non_finite_inputs():
    with pytest.raises(NumericalError):
        predict_prob([np.inf], [0.0], [0.0], [0.0])


def test_prototype(rng):
    v = rng.normal(size=4)
    np.testing.assert_array_equal(prototype(np.stack([v, v])), v)
    np.testing.assert_array_equal(prototype(np.array([[1.0, 0.0], [0.0, 1.0]])), [0.5, 0.5])
    m = rng.normal(size=(5, 8))
    naive = [sum(m[i, j] for i in range(5)) / 5 for j in range(8)]
    np.testing.assert_allclose(prototype(m), naive, atol=1e-12)
    with pytest.raises(ValueError):
        prototype(np.zeros((0, 3)))


def test_complement_and_translation(rng):
    for _ in range(200):
        qp, pp, qn, pn = (rng.normal(scale=2, size=6) for _ in range(4))
        pred = predict_prob(qp, pp, qn, pn)
        assert abs(pred.prob_positive + pred.prob_negative - 1.0) < 1e-9
        c1, c2 = rng.normal(size=6), rng.normal(size=6)
        moved = predict_prob(qp + c1, pp + c1, qn + c2, pn + c2)
        assert abs(moved.prob_positive - pred.prob_positive) < 1e-9
        assert abs(moved.dist_pos - pred.dist_pos) < 1e-9


def test_loss_values():
    half = _at_distances(1.0, 1.0)
    assert task_loss([(half, 1)], None, 0.0) == pytest.approx(math.log(2), abs=1e-12)
    sure = _at_distances(0.0, 40.0)
    assert task_loss([(sure, 1)], None, 0.0) < 1e-15
    # the clamp bounds the loss of a confident mistake
    assert task_loss([(sure, 0)], None, 0.0) == pytest.approx(-math.log(1e-12), rel=1e-12)
    assert bce(np.array([0.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(-math.log(1e-12))


def test_loss_nonnegative(rng):
    for _ in range(100):
        pred = _at_distances(rng.uniform(0, 5), rng.uniform(0, 5))
        assert task_loss([(pred, int(rng.integers(2)))], None, 0.0) >= 0


def test_weight_decay_only_on_params(small_cfg):
    params = random_params(small_cfg, 0)
    half = _at_distances(1.0, 1.0)
    got = task_loss([(half, 1)], params, 0.1)
    assert got == pytest.approx(math.log(2) + 0.1 * params.sq_norm())


def test_prediction_gradients_finite_differences(rng):
    for _ in range(30):
        vecs = [rng.normal(size=(1, 5)) for _ in range(4)]
        truth = np.array([float(rng.integers(2))])

        def f():
            pred = predict_prob(*(v[0] for v in vecs))
            return task_loss([(pred, int(truth[0]))], None, 0.0)

        _, grads = prediction_loss_grads(*vecs, truth)
        for v, g in zip(vecs, grads):
            for j in range(5):
                num = central_difference(f, v, (0, j))
                # difference-quotient round-off is ~1e-10 absolute, so entries
                # below 1e-4 are compared against that floor
                assert rel_error(num, g[0, j], floor=1e-4) < 1e-6


def test_predict_tasks_matches_per_query_path(rng):
    cfg = TransformConfig(8, 8, 2, 16, 2, p_drop=0.0)
    params = random_params(cfg, 1)
    emb = rng.normal(size=(40, 8))
    tasks = [random_task(rng, 40, n) for n in (2, 3, 2)]
    got = predict_tasks(emb, tasks, params)
    for t, probs in zip(tasks, got):
        for q, p in zip(t.queries, probs):
            qp, sp = transform_set(emb[q], emb[t.support_pos], params)
            qn, sn = transform_set(emb[q], emb[t.support_neg], params)
            ref = predict_prob(qp, sp.mean(axis=0), qn, sn.mean(axis=0)).prob_positive
            assert abs(ref - p) < 1e-12


def test_identity_baseline(rng):
    emb = rng.normal(size=(20, 3))
    t = random_task(rng, 20, 3)
    got = predict_tasks(emb, [t], None)[0]
    for q, p in zip(t.queries, got):
        ref = predict_prob(emb[q], emb[t.support_pos].mean(0), emb[q], emb[t.support_neg].mean(0))
        assert abs(ref.prob_positive - p) < 1e-12


def test_episode_loss_is_mean_of_task_sums(rng):
    cfg = TransformConfig(8, 8, 2, 16, 1, p_drop=0.0)
    params = random_params(cfg, 2)
    emb = rng.normal(size=(40, 8))
    tasks = [random_task(rng, 40, 2), random_task(rng, 40, 3)]
    eg = episode_loss_and_grads(emb, tasks, params, 0.01, train=False)
    per_task = []
    for t, probs in zip(tasks, predict_tasks(emb, tasks, params)):
        per_task.append(sum(-math.log(p if y else 1 - p) for p, y in zip(probs, t.truths)))
    assert eg.loss == pytest.approx(np.mean(per_task) + 0.01 * params.sq_norm(), rel=1e-10)
    assert set(eg.rows.tolist()) == set(np.concatenate([t.nodes() for t in tasks]).tolist())
