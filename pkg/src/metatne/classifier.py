"""Tailored prototypes, the two-way distance classifier and the episode loss.

For a query ``q`` the transformation is run twice, once with the positive
supports and once with the negative supports.  Each call yields an adapted
query vector and adapted support vectors whose mean is the prototype of that
polarity.  The predicted probability is a softmax over negated squared
distances:

    p = exp(-d+) / (exp(-d+) + exp(-d-)),   d_m = ||q_m - c_m||^2
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericalError
from .tasks import Task
from .transform import TransformParams, transform_backward, transform_batch

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class Prediction:
    prob_positive: float
    dist_pos: float
    dist_neg: float

    @property
    def prob_negative(self) -> float:
        return float(_two_way(np.float64(self.dist_neg), np.float64(self.dist_pos)))


def _two_way(d_a, d_b):
    """exp(-d_a) / (exp(-d_a) + exp(-d_b)) with max-subtraction."""
    top = np.maximum(-d_a, -d_b)
    ea = np.exp(-d_a - top)
    eb = np.exp(-d_b - top)
    return ea / (ea + eb)


def prototype(support_outs: np.ndarray) -> np.ndarray:
    support_outs = np.asarray(support_outs)
    if support_outs.ndim != 2 or len(support_outs) == 0:
        raise ValueError("prototype needs a nonempty (n, d) matrix of support vectors")
    return support_outs.mean(axis=0)


def predict_probs(q_pos, proto_pos, q_neg, proto_neg):
    """Vectorized classifier over the leading axis; returns ``(p, d_pos, d_neg)``."""
    dp = np.sum((q_pos - proto_pos) ** 2, axis=-1)
    dn = np.sum((q_neg - proto_neg) ** 2, axis=-1)
    if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dn))):
        raise NumericalError("non-finite distance in prototype classifier")
    return _two_way(dp, dn), dp, dn


def predict_prob(q_pos, proto_pos, q_neg, proto_neg) -> Prediction:
    p, dp, dn = predict_probs(
        np.asarray(q_pos, float), np.asarray(proto_pos, float),
        np.asarray(q_neg, float), np.asarray(proto_neg, float),
    )
    return Prediction(float(p), float(dp), float(dn))


def bce(prob, truth):
    """Binary cross-entropy on probabilities clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(truth * np.log(p) + (1.0 - truth) * np.log(1.0 - p))


_LOG_CLAMP = np.log(PROB_CLAMP)


def _bce_from_distances(d_pos, d_neg, truth):
    """Clamped cross-entropy evaluated in log space, plus a mask telling
    whether the active term is inside the clamp (zero gradient outside).

    Forming ``1 - p`` directly loses all precision once ``p`` is near 1.
    """
    lse = np.logaddexp(-d_pos, -d_neg)
    log_p = -d_pos - lse
    log_q = -d_neg - lse
    active = np.where(truth > 0.5, log_p, log_q)
    return -np.maximum(active, _LOG_CLAMP), active >= _LOG_CLAMP


def task_loss(
    predictions: Sequence[tuple[Prediction, int]], params: TransformParams | None, lam: float
) -> float:
    """Summed query cross-entropy plus ``lam`` times the squared norm of the
    transform parameters."""
    if not predictions:
        raise ValueError("task_loss needs at least one prediction")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    d_pos = np.array([p.dist_pos for p, _ in predictions])
    d_neg = np.array([p.dist_neg for p, _ in predictions])
    truths = np.array([t for _, t in predictions], dtype=float)
    loss = float(_bce_from_distances(d_pos, d_neg, truths)[0].sum())
    if lam and params is not None:
        loss += lam * params.sq_norm()
    return loss


def prediction_loss_grads(q_pos, proto_pos, q_neg, proto_neg, truth):
    """Per-query clamped cross-entropy and its gradients with respect to the
    four input vectors (rows are queries).

    Returns ``(losses, (d_q_pos, d_proto_pos, d_q_neg, d_proto_neg))``.
    """
    prob, dist_p, dist_n = predict_probs(q_pos, proto_pos, q_neg, proto_neg)
    losses, inside = _bce_from_distances(dist_p, dist_n, truth)
    # d(loss)/d(d_neg - d_pos) = p - truth away from the clamp
    dz = np.where(inside, prob - truth, 0.0)[:, None]
    diff_p = 2.0 * (q_pos - proto_pos)
    diff_n = 2.0 * (q_neg - proto_neg)
    return losses, (-dz * diff_p, dz * diff_p, dz * diff_n, -dz * diff_n)


# -- batched episodes --------------------------------------------------------


def _stack_sets(emb: np.ndarray, queries: np.ndarray, supports: np.ndarray) -> np.ndarray:
    """``(len(queries), 1 + len(supports), d)`` sets, query in slot 0."""
    idx = np.empty((len(queries), 1 + len(supports)), dtype=np.int64)
    idx[:, 0] = queries
    idx[:, 1:] = supports
    return emb[idx], idx


def _group_by_support(tasks: Sequence[Task]) -> dict[tuple[int, int], list[int]]:
    groups: dict[tuple[int, int], list[int]] = {}
    for i, t in enumerate(tasks):
        groups.setdefault((len(t.support_pos), len(t.support_neg)), []).append(i)
    return groups


def _batch_inputs(emb, tasks, members):
    xs_p, xs_n, ids_p, ids_n, owner, truths = [], [], [], [], [], []
    for i in members:
        t = tasks[i]
        q = t.queries
        xp, ip = _stack_sets(emb, q, t.support_pos)
        xn, in_ = _stack_sets(emb, q, t.support_neg)
        xs_p.append(xp); xs_n.append(xn); ids_p.append(ip); ids_n.append(in_)
        owner.append(np.full(len(q), i))
        truths.append(t.truths)
    return (np.concatenate(xs_p), np.concatenate(xs_n), np.concatenate(ids_p),
            np.concatenate(ids_n), np.concatenate(owner), np.concatenate(truths))


def predict_tasks(emb: np.ndarray, tasks: Sequence[Task], params: TransformParams | None):
    """Eval-mode probabilities for every query of every task.

    Returns one array per task in query order (positives first).  With
    ``params=None`` the transformation is the identity, which gives the
    task-agnostic nearest-prototype classifier over raw embeddings.
    """
    out: list[np.ndarray] = [None] * len(tasks)  # type: ignore[list-item]
    for members in _group_by_support(tasks).values():
        xp, xn, _, _, owner, _ = _batch_inputs(emb, tasks, members)
        if params is not None:
            xp, _ = transform_batch(xp, params)
            xn, _ = transform_batch(xn, params)
        p, _, _ = predict_probs(xp[:, 0], xp[:, 1:].mean(axis=1), xn[:, 0], xn[:, 1:].mean(axis=1))
        for i in members:
            out[i] = p[owner == i]
    return out


def episode_loss(emb: np.ndarray, tasks: Sequence[Task], params: TransformParams, lam: float) -> float:
    """Eval-mode value of the objective computed by :func:`episode_loss_and_grads`."""
    if not tasks:
        raise ValueError("need at least one task")
    total = 0.0
    for members in _group_by_support(tasks).values():
        xp, xn, _, _, _, truth = _batch_inputs(emb, tasks, members)
        yp, _ = transform_batch(xp, params)
        yn, _ = transform_batch(xn, params)
        _, dp, dn = predict_probs(yp[:, 0], yp[:, 1:].mean(axis=1), yn[:, 0], yn[:, 1:].mean(axis=1))
        total += float(_bce_from_distances(dp, dn, truth)[0].sum())
    return total / len(tasks) + (lam * params.sq_norm() if lam else 0.0)


@dataclass
class EpisodeGrads:
    loss: float
    params: TransformParams
    rows: np.ndarray
    row_grads: np.ndarray


def episode_loss_and_grads(
    emb: np.ndarray,
    tasks: Sequence[Task],
    params: TransformParams,
    lam: float,
    train: bool = True,
    rng: np.random.Generator | None = None,
) -> EpisodeGrads:
    """Mean over tasks of the summed query loss, plus ``lam * ||params||^2``,
    with gradients for the transform parameters and the embedding rows used.

    ``rows`` are the unique node ids touched by the batch and ``row_grads``
    their gradients, aligned row by row.
    """
    if not tasks:
        raise ValueError("need at least one task")
    n_tasks = len(tasks)
    d = emb.shape[1]
    total = 0.0
    grads = params.zeros_like()
    g_arrays = grads.named_arrays()
    all_ids, all_dx = [], []

    for members in _group_by_support(tasks).values():
        xp, xn, ip, in_, _, truth = _batch_inputs(emb, tasks, members)
        yp, cp = transform_batch(xp, params, train=train, rng=rng, keep_cache=True)
        yn, cn = transform_batch(xn, params, train=train, rng=rng, keep_cache=True)
        qp, qn = yp[:, 0], yn[:, 0]
        pp, pn = yp[:, 1:].mean(axis=1), yn[:, 1:].mean(axis=1)
        losses, (dqp, dpp, dqn, dpn) = prediction_loss_grads(qp, pp, qn, pn, truth)
        total += float(losses.sum())

        # each support slot receives an equal share of its prototype's gradient
        dyp = np.empty_like(yp)
        dyn = np.empty_like(yn)
        dyp[:, 0] = dqp / n_tasks
        dyp[:, 1:] = (dpp / (n_tasks * (yp.shape[1] - 1)))[:, None, :]
        dyn[:, 0] = dqn / n_tasks
        dyn[:, 1:] = (dpn / (n_tasks * (yn.shape[1] - 1)))[:, None, :]

        for y_cache, dy, ids in ((cp, dyp, ip), (cn, dyn, in_)):
            gp, dx = transform_backward(params, y_cache, dy)
            for name, arr in gp.named_arrays().items():
                g_arrays[name] += arr
            all_ids.append(ids.ravel())
            all_dx.append(dx.reshape(-1, d))

    loss = total / n_tasks
    if lam:
        loss += lam * params.sq_norm()
        for name, arr in params.named_arrays().items():
            g_arrays[name] += 2.0 * lam * arr
    ids = np.concatenate(all_ids)
    dx = np.concatenate(all_dx)
    rows, inv = np.unique(ids, return_inverse=True)
    row_grads = np.zeros((len(rows), d))
    np.add.at(row_grads, inv, dx)
    if not np.isfinite(loss):
        raise NumericalError("non-finite episode loss")
    return EpisodeGrads(loss, grads, rows, row_grads)
