"""Planted-community graphs with overlapping labels for desk-scale runs."""

from __future__ import annotations

from itertools import combinations
from typing import TextIO

import numpy as np

from .graph import Graph, LabelMatrix


def planted_partition(
    n_nodes: int, n_communities: int, p_in: float, p_out: float, rng: np.random.Generator
) -> tuple[Graph, np.ndarray]:
    """Stochastic block model with equal-size blocks (the last absorbs any
    remainder).  Returns the graph and each node's community."""
    membership = np.minimum(np.arange(n_nodes) * n_communities // n_nodes, n_communities - 1)
    iu, ju = np.triu_indices(n_nodes, k=1)
    same = membership[iu] == membership[ju]
    p = np.where(same, p_in, p_out)
    keep = rng.random(len(iu)) < p
    graph = Graph.from_edges(n_nodes, np.stack([iu[keep], ju[keep]], axis=1))
    return graph, membership


def community_labels(
    membership: np.ndarray, n_unions: int, rng: np.random.Generator
) -> LabelMatrix:
    """One label per community, then ``n_unions`` labels that each cover two
    distinct communities (pairs drawn without repetition)."""
    n_comm = int(membership.max()) + 1
    positives = [np.flatnonzero(membership == c) for c in range(n_comm)]
    pairs = list(combinations(range(n_comm), 2))
    for k in rng.choice(len(pairs), size=n_unions, replace=False):
        a, b = pairs[k]
        positives.append(np.flatnonzero((membership == a) | (membership == b)))
    return LabelMatrix(len(membership), tuple(positives))


def make_sbm_dataset(
    seed: int,
    n_nodes: int = 400,
    n_communities: int = 8,
    p_in: float = 0.2,
    p_out: float = 0.01,
    n_unions: int = 8,
) -> tuple[Graph, LabelMatrix]:
    rng = np.random.default_rng(seed)
    graph, membership = planted_partition(n_nodes, n_communities, p_in, p_out, rng)
    return graph, community_labels(membership, n_unions, rng)


def write_labels(labels: LabelMatrix, stream: TextIO) -> None:
    for y, nodes in enumerate(labels.positives):
        for v in nodes:
            stream.write(f"{v} {y}\n")
