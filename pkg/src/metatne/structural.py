"""Structure-preserving node embeddings: skip-gram with negative sampling
over 1-hop neighbor pairs.

Each undirected edge contributes the directed pairs (i, j) and (j, i).  For
a pair the loss is

    -log sigma(u_i . c_j) - sum_k log sigma(-u_i . c_k)

with ``u`` the center (exported) vectors, ``c`` the context vectors and the
negatives ``k`` drawn from a degree**exponent noise distribution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NumericalError, SamplingError
from .graph import Graph

EMB_MAGIC = b"MTNEEMB\x01"
_EMB_HEADER = struct.Struct("<8sQQ")
NEG_RESAMPLE_ATTEMPTS = 8


@dataclass
class EmbeddingMatrix:
    center: np.ndarray
    context: np.ndarray

    @property
    def dim(self) -> int:
        return self.center.shape[1]

    @property
    def node_count(self) -> int:
        return self.center.shape[0]

    def copy(self) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.center.copy(), self.context.copy())


def init_embeddings(node_count: int, d: int, seed: int | np.random.Generator) -> EmbeddingMatrix:
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    rng = np.random.default_rng(seed)
    center = rng.uniform(-0.5 / d, 0.5 / d, size=(node_count, d))
    return EmbeddingMatrix(center, np.zeros((node_count, d)))


class NoiseDistribution:
    """Node distribution proportional to ``degree ** exponent``.

    Draws use Vose's alias method (O(1) per sample); ``cumulative`` is kept
    for inspection and inverse-CDF checks.
    """

    def __init__(self, weights: np.ndarray, exponent: float):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 1 or len(weights) == 0:
            raise ValueError("noise weights must be a nonempty vector")
        if np.any(weights < 0):
            raise ValueError("noise weights must be nonnegative")
        total = weights.sum()
        if total <= 0:
            weights = np.ones_like(weights)
            total = weights.sum()
        self.exponent = exponent
        self.weights = weights
        self.probs = weights / total
        self.cumulative = np.cumsum(weights)
        self._prob, self._alias = _build_alias(self.probs)

    def __len__(self) -> int:
        return len(self.probs)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        n = len(self.probs)
        idx = rng.integers(0, n, size=size)
        keep = rng.random(size=size) < self._prob[idx]
        return np.where(keep, idx, self._alias[idx])


def _build_alias(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(probs)
    scaled = probs * n
    prob = np.ones(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        l = large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        scaled[l] = (scaled[l] + scaled[s]) - 1.0
        (small if scaled[l] < 1.0 else large).append(l)
    # leftovers are 1 up to rounding
    return prob, alias


def build_noise(graph: Graph, exponent: float = 0.75) -> NoiseDistribution:
    if graph.node_count == 0:
        raise ValueError("graph has no nodes")
    deg = graph.degrees.astype(np.float64)
    return NoiseDistribution(np.power(deg, exponent, where=deg > 0, out=np.zeros_like(deg)), exponent)


def sample_edge_batch(graph: Graph, n1: int, rng: np.random.Generator) -> np.ndarray:
    """``n1`` (center, neighbor) pairs, uniform over directed edge occurrences."""
    if graph.edge_count == 0:
        raise SamplingError("cannot sample pairs from an edgeless graph")
    e = rng.integers(0, graph.edge_count, size=n1)
    flip = rng.random(n1) < 0.5
    pairs = graph.edges[e].copy()
    pairs[flip] = pairs[flip][:, ::-1]
    return pairs


def draw_negatives(
    noise: NoiseDistribution, pairs: np.ndarray, n_neg: int, rng: np.random.Generator
) -> np.ndarray:
    """Noise nodes per pair; draws hitting the pair's true neighbor are redrawn
    up to ``NEG_RESAMPLE_ATTEMPTS`` times and then kept."""
    negs = noise.sample(rng, (len(pairs), n_neg))
    target = pairs[:, 1:2]
    for _ in range(NEG_RESAMPLE_ATTEMPTS):
        clash = negs == target
        if not clash.any():
            break
        negs[clash] = noise.sample(rng, int(clash.sum()))
    return negs


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def sgns_loss_and_grads(emb: EmbeddingMatrix, pairs: np.ndarray, negatives: np.ndarray):
    """Per-pair SGNS losses and gradients of their *sum*.

    Returns ``(losses, grad_center, grad_pos, grad_neg)`` with shapes
    ``(B,)``, ``(B, d)``, ``(B, d)`` and ``(B, k, d)``; row ``b`` of each
    gradient belongs to ``pairs[b, 0]``, ``pairs[b, 1]`` and
    ``negatives[b]`` respectively.
    """
    u = emb.center[pairs[:, 0]]
    c_pos = emb.context[pairs[:, 1]]
    c_neg = emb.context[negatives]
    s_pos = np.einsum("bd,bd->b", u, c_pos)
    s_neg = np.einsum("bd,bkd->bk", u, c_neg)
    losses = -_log_sigmoid(s_pos) - _log_sigmoid(-s_neg).sum(axis=1)

    g_pos = _sigmoid(s_pos) - 1.0
    g_neg = _sigmoid(s_neg)
    grad_center = g_pos[:, None] * c_pos + np.einsum("bk,bkd->bd", g_neg, c_neg)
    grad_pos = g_pos[:, None] * u
    grad_neg = g_neg[:, :, None] * u[:, None, :]
    return losses, grad_center, grad_pos, grad_neg


def sgns_step(
    emb: EmbeddingMatrix,
    pairs: np.ndarray,
    noise: NoiseDistribution,
    n_neg: int,
    lr: float,
    rng: np.random.Generator,
) -> float:
    """One plain-SGD update on a batch of pairs; returns the mean pair loss."""
    if n_neg < 1 or lr <= 0:
        raise ValueError("n_neg must be >= 1 and lr > 0")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    negs = draw_negatives(noise, pairs, n_neg, rng)
    losses, g_c, g_p, g_n = sgns_loss_and_grads(emb, pairs, negs)
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise NumericalError("non-finite SGNS loss")
    np.add.at(emb.center, pairs[:, 0], -lr * g_c)
    np.add.at(emb.context, pairs[:, 1], -lr * g_p)
    np.add.at(emb.context, negs.ravel(), -lr * g_n.reshape(-1, emb.dim))
    return loss


def save_embeddings(path: str | Path, emb: EmbeddingMatrix, config: dict | None = None) -> None:
    """Binary checkpoint (header, center rows, context rows) and a
    ``key = value`` sidecar at ``path + '.cfg'``."""
    path = Path(path)
    n, d = emb.center.shape
    with open(path, "wb") as f:
        f.write(_EMB_HEADER.pack(EMB_MAGIC, n, d))
        f.write(np.ascontiguousarray(emb.center, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(emb.context, dtype="<f4").tobytes())
    with open(str(path) + ".cfg", "w") as f:
        f.write(f"node_count = {n}\nd = {d}\n")
        for k, v in sorted((config or {}).items()):
            f.write(f"{k} = {v}\n")


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    data = Path(path).read_bytes()
    if len(data) < _EMB_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, n, d = _EMB_HEADER.unpack_from(data)
    if magic != EMB_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    expected = _EMB_HEADER.size + 2 * n * d * 4
    if len(data) != expected:
        raise CheckpointError(
            f"{path}: field 'd' (={d}) and node_count (={n}) imply {expected} bytes, file has {len(data)}"
        )
    body = np.frombuffer(data, dtype="<f4", offset=_EMB_HEADER.size).astype(np.float64)
    center = body[: n * d].reshape(n, d).copy()
    context = body[n * d :].reshape(n, d).copy()
    return EmbeddingMatrix(center, context)
