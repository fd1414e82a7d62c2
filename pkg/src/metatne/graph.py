"""Graph, node-label and label-split containers plus their text loaders.

Edge files hold one ``u v`` pair per line, label files one ``node label``
pair per line.  Lines starting with ``#`` are comments.  Commas are accepted
as separators so the usual ``edges.csv`` / ``group-edges.csv`` dumps load
without preprocessing.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import EmptyGraphError, NodeRangeError, ParseError, SplitError

_SEP = re.compile(r"[\s,]+")


def _records(source: Iterable[str]):
    """Yield ``(line_number, tokens)`` for every data line."""
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, [t for t in _SEP.split(line) if t]


class IdMap:
    """Bijection between external id tokens and dense integer ids.

    Dense ids follow the numeric order of the external ids (lexicographic
    order when some token is not an integer), so an already dense,
    zero-based file maps onto itself.
    """

    def __init__(self, tokens: Iterable[str]):
        uniq = set(tokens)
        try:
            ordered = sorted(uniq, key=int)
        except ValueError:
            ordered = sorted(uniq)
        self.external = list(ordered)
        self._index = {tok: i for i, tok in enumerate(self.external)}

    def __len__(self) -> int:
        return len(self.external)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __getitem__(self, token: str) -> int:
        return self._index[token]

    @classmethod
    def from_files(cls, *sources: Iterable[str], column: int | None = None) -> "IdMap":
        """Collect tokens from the given columns (all id columns by default)."""
        toks = []
        for source in sources:
            for _, parts in _records(source):
                toks.extend(parts[:2] if column is None else parts[column : column + 1])
        return cls(toks)

    def write(self, stream: TextIO) -> None:
        for i, tok in enumerate(self.external):
            stream.write(f"{i}\t{tok}\n")

    @classmethod
    def read(cls, stream: Iterable[str]) -> "IdMap":
        pairs = []
        for lineno, parts in _records(stream):
            if len(parts) != 2:
                raise ParseError("expected 'dense_id external_id'", lineno)
            pairs.append((int(parts[0]), parts[1]))
        pairs.sort()
        if [p[0] for p in pairs] != list(range(len(pairs))):
            raise ParseError("dense ids in remap table are not 0..n-1")
        obj = cls.__new__(cls)
        obj.external = [p[1] for p in pairs]
        obj._index = {tok: i for i, tok in enumerate(obj.external)}
        return obj


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph in CSR form.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``,
    sorted lexicographically.  ``indptr``/``indices`` give sorted neighbor
    lists.
    """

    node_count: int
    edges: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, node_count: int, pairs) -> "Graph":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= node_count):
            raise NodeRangeError(f"edge endpoint outside [0, {node_count})")
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        edges = np.unique(np.stack([lo, hi], axis=1), axis=0) if len(lo) else np.empty((0, 2), np.int64)

        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        order = np.lexsort((dst, src))
        indices = dst[order]
        counts = np.bincount(src, minlength=node_count)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        for arr in (edges, indices, indptr):
            arr.setflags(write=False)
        return cls(int(node_count), edges, indptr, indices)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node] : self.indptr[node + 1]]

    @property
    def adjacency(self) -> list[list[int]]:
        return [self.neighbors(i).tolist() for i in range(self.node_count)]


def load_edge_list(
    source: Iterable[str], id_map: IdMap | None = None, node_count: int | None = None
) -> Graph:
    """Parse an undirected edge list.

    Without ``id_map`` the tokens are used as dense ids directly and the node
    count is one more than the largest id (or ``node_count`` if larger).
    """
    pairs = []
    for lineno, parts in _records(source):
        if len(parts) != 2:
            raise ParseError(f"expected two node ids, got {len(parts)} fields", lineno)
        try:
            if id_map is not None:
                pairs.append((id_map[parts[0]], id_map[parts[1]]))
            else:
                pairs.append((int(parts[0]), int(parts[1])))
        except (ValueError, KeyError) as exc:
            raise ParseError(f"bad node id {exc}", lineno) from None
        if pairs[-1][0] < 0 or pairs[-1][1] < 0:
            raise ParseError("negative node id", lineno)
    if not pairs:
        raise EmptyGraphError("edge list contains no edges")
    seen = 1 + max(max(p) for p in pairs)
    if id_map is not None:
        seen = max(seen, len(id_map))
    n = max(seen, node_count or 0)
    return Graph.from_edges(n, pairs)


def write_edge_list(graph: Graph, stream: TextIO) -> None:
    stream.write(f"# nodes={graph.node_count} edges={graph.edge_count}\n")
    for u, v in graph.edges:
        stream.write(f"{u} {v}\n")


@dataclass(frozen=True)
class LabelMatrix:
    """Binary node-label indicators stored as sorted positive sets.

    A node missing from ``positives[y]`` is a negative for ``y``; every label
    is treated as complete.
    """

    node_count: int
    positives: tuple[np.ndarray, ...]
    _masks: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def label_count(self) -> int:
        return len(self.positives)

    def negatives(self, label: int) -> np.ndarray:
        return np.flatnonzero(~self.mask(label))

    def mask(self, label: int) -> np.ndarray:
        m = self._masks.get(label)
        if m is None:
            m = np.zeros(self.node_count, dtype=bool)
            m[self.positives[label]] = True
            m.setflags(write=False)
            self._masks[label] = m
        return m

    def holds(self, node: int, label: int) -> bool:
        return bool(self.mask(label)[node])


def load_labels(
    source: Iterable[str],
    node_count: int,
    node_map: IdMap | None = None,
    label_map: IdMap | None = None,
) -> LabelMatrix:
    """Parse ``node_id label_id`` lines into a :class:`LabelMatrix`."""
    rows: list[tuple[int, int]] = []
    for lineno, parts in _records(source):
        if len(parts) != 2:
            raise ParseError(f"expected 'node_id label_id', got {len(parts)} fields", lineno)
        try:
            node = node_map[parts[0]] if node_map is not None else int(parts[0])
            label = label_map[parts[1]] if label_map is not None else int(parts[1])
        except (ValueError, KeyError) as exc:
            raise ParseError(f"bad id {exc}", lineno) from None
        if label < 0:
            raise ParseError("negative label id", lineno)
        if not 0 <= node < node_count:
            raise NodeRangeError(f"line {lineno}: node {node} outside [0, {node_count})")
        rows.append((node, label))

    label_count = 1 + max((r[1] for r in rows), default=-1)
    if label_map is not None:
        label_count = max(label_count, len(label_map))
    buckets: list[set[int]] = [set() for _ in range(label_count)]
    for node, label in rows:
        buckets[label].add(node)
    positives = []
    for b in buckets:
        arr = np.array(sorted(b), dtype=np.int64)
        arr.setflags(write=False)
        positives.append(arr)
    return LabelMatrix(node_count, tuple(positives))


@dataclass(frozen=True)
class LabelSplit:
    known: frozenset[int]
    validation: frozenset[int]
    novel: frozenset[int]

    def pool(self, name: str) -> frozenset[int]:
        aliases = {"known": self.known, "train": self.known, "validation": self.validation,
                   "val": self.validation, "novel": self.novel, "test": self.novel}
        try:
            return aliases[name]
        except KeyError:
            raise ValueError(f"unknown label pool {name!r}") from None

    def write(self, stream: TextIO) -> None:
        for name in ("known", "validation", "novel"):
            ids = " ".join(str(i) for i in sorted(getattr(self, name)))
            stream.write(f"{name}: {ids}\n")

    @classmethod
    def read(cls, stream: Iterable[str]) -> "LabelSplit":
        parts = {}
        for raw in stream:
            if ":" not in raw:
                continue
            name, ids = raw.split(":", 1)
            parts[name.strip()] = frozenset(int(t) for t in ids.split())
        try:
            return cls(parts["known"], parts["validation"], parts["novel"])
        except KeyError as exc:
            raise ParseError(f"label split file missing section {exc}") from None


def split_sizes(label_count: int, ratio: tuple[float, float, float]) -> tuple[int, int, int]:
    sizes = [int(np.floor(r * label_count)) for r in ratio]
    rem = label_count - sum(sizes)
    i = 0
    while rem > 0:
        sizes[i % 3] += 1
        rem -= 1
        i += 1
    return tuple(sizes)


def split_labels(
    labels: LabelMatrix, ratio: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> LabelSplit:
    """Randomly partition label ids into known / validation / novel sets.

    Each part gets ``floor(r * label_count)`` labels; the leftover labels are
    handed out one at a time starting with the known set.
    """
    if len(ratio) != 3 or any(r <= 0 for r in ratio) or abs(sum(ratio) - 1.0) > 1e-9:
        raise SplitError(f"ratio must be three positive numbers summing to 1, got {ratio}")
    n = labels.label_count
    if n < 3:
        raise SplitError(f"need at least 3 labels to split, got {n}")
    n_known, n_val, _ = split_sizes(n, ratio)
    perm = np.random.default_rng(seed).permutation(n)
    return LabelSplit(
        known=frozenset(perm[:n_known].tolist()),
        validation=frozenset(perm[n_known : n_known + n_val].tolist()),
        novel=frozenset(perm[n_known + n_val :].tolist()),
    )
