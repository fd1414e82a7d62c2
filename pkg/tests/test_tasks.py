import io

import numpy as np
import pytest

from metatne.errors import NoEligibleLabelError, ParseError
from metatne.tasks import (
    Task,
    TaskShape,
    eligible_labels,
    read_tasks,
    sample_task,
    sample_tasks,
    write_tasks,
)
from helpers import labels_from_sets


def test_shape_validation():
    with pytest.raises(ValueError):
        TaskShape(0, 1, 1, 1)
    s = TaskShape.symmetric(10, 20)
    assert str(s) == "(10,20,10,20)" and s.n_pos == 20 and s.n_neg == 40


def test_eligibility():
    lm = labels_from_sets(100, [set(range(5)), set(range(20))])
    shape = TaskShape(10, 20, 10, 20)
    assert eligible_labels(lm, [0, 1], shape) == [1]


def test_exhaustion_case(rng):
    lm = labels_from_sets(10, [{0, 1, 2, 3}])
    for _ in range(50):
        t = sample_task(lm, [0], TaskShape(2, 3, 2, 3), rng)
        assert set(t.support_pos) | set(t.query_pos) == {0, 1, 2, 3}
        neg = set(t.support_neg) | set(t.query_neg)
        assert len(neg) == 6 and neg == set(range(4, 10))
        t.check(lm)


def test_empty_pool_raises(rng):
    lm = labels_from_sets(10, [{0, 1}])
    with pytest.raises(NoEligibleLabelError):
        sample_task(lm, [0], TaskShape(2, 2, 2, 2), rng)


def _random_labels(rng, n=60, n_labels=8):
    sets = []
    for _ in range(n_labels):
        k = int(rng.integers(4, 40))
        sets.append(set(rng.choice(n, size=k, replace=False).tolist()))
    return labels_from_sets(n, sets)


def test_invariants_over_many_tasks():
    rng = np.random.default_rng(0)
    lm = _random_labels(rng)
    shape = TaskShape(2, 4, 2, 4)
    tasks = sample_tasks(lm, range(lm.label_count), shape, 10_000, rng)
    for t in tasks:
        t.check(lm)
        assert (len(t.support_pos), len(t.support_neg), len(t.query_pos), len(t.query_neg)) == (2, 4, 2, 4)


def test_check_rejects_violations():
    lm = labels_from_sets(6, [{0, 1, 2}])
    ok = Task(0, np.array([0]), np.array([3]), np.array([1]), np.array([4]))
    ok.check(lm)
    bad = [
        Task(0, np.array([0]), np.array([3]), np.array([0]), np.array([4])),
        Task(0, np.array([0, 0]), np.array([3]), np.array([1]), np.array([4])),
        Task(0, np.array([3]), np.array([4]), np.array([1]), np.array([5])),
    ]
    for t in bad:
        with pytest.raises(ValueError):
            t.check(lm)


def test_deterministic():
    lm = _random_labels(np.random.default_rng(1))
    shape = TaskShape(2, 3, 2, 3)
    a = sample_tasks(lm, range(8), shape, 30, np.random.default_rng(9))
    b = sample_tasks(lm, range(8), shape, 30, np.random.default_rng(9))
    for x, y in zip(a, b):
        assert x.label_id == y.label_id
        assert np.array_equal(x.nodes(), y.nodes())


def test_label_selection_uniform():
    lm = labels_from_sets(40, [set(range(10)), set(range(10, 20)), set(range(20, 30)), set(range(5))])
    shape = TaskShape(3, 3, 3, 3)
    eligible = eligible_labels(lm, range(4), shape)
    assert eligible == [0, 1, 2]
    n = 6000
    tasks = sample_tasks(lm, range(4), shape, n, np.random.default_rng(2))
    counts = np.bincount([t.label_id for t in tasks], minlength=4)
    p = 1 / 3
    sigma = np.sqrt(n * p * (1 - p))
    assert counts[3] == 0
    assert np.all(np.abs(counts[:3] - n * p) <= 3 * sigma)


def test_large_graph_negatives_use_rejection_path(rng):
    lm = labels_from_sets(5000, [set(range(30))])
    t = sample_task(lm, [0], TaskShape(5, 20, 5, 20), rng)
    t.check(lm)


def test_task_file_roundtrip(rng):
    lm = _random_labels(rng)
    tasks = sample_tasks(lm, range(8), TaskShape(2, 3, 1, 2), 5, rng)
    buf = io.StringIO()
    assert write_tasks(tasks, buf) == 5
    buf.seek(0)
    back = read_tasks(buf)
    for x, y in zip(tasks, back):
        assert x.label_id == y.label_id
        for f in ("support_pos", "support_neg", "query_pos", "query_neg"):
            assert np.array_equal(getattr(x, f), getattr(y, f))


def test_task_file_errors():
    with pytest.raises(ParseError, match="line 1"):
        read_tasks(io.StringIO("0 | 1 | 2 | 3\n"))
    with pytest.raises(ParseError, match="line 2"):
        read_tasks(io.StringIO("0 | 1 | 2 | 3 | 4\n0 |  | 2 | 3 | 4\n"))
