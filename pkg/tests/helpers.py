"""Small builders shared by several test modules."""

import numpy as np

from metatne.graph import LabelMatrix
from metatne.tasks import Task
from metatne.transform import init_transform


def labels_from_sets(node_count, sets):
    return LabelMatrix(node_count, tuple(np.array(sorted(s), dtype=np.int64) for s in sets))


def random_params(cfg, seed, scale=0.1):
    """Initialized params with every tensor perturbed, so biases and
    layer-norm parameters are not at their trivial init values."""
    params = init_transform(cfg, seed)
    r = np.random.default_rng(seed + 10_000)
    for arr in params.named_arrays().values():
        arr += r.normal(0.0, scale, size=arr.shape)
    return params


def random_task(rng, node_count, n_sup, n_qpos=2, n_qneg=3):
    perm = rng.permutation(node_count)
    a = 2 * n_sup
    return Task(0, perm[:n_sup], perm[n_sup:a], perm[a : a + n_qpos], perm[a + n_qpos : a + n_qpos + n_qneg])
