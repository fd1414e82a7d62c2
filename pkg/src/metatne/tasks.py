"""Episodic few-shot task construction and the frozen task-file format.

A task file has one record per line::

    label_id | S+ ids | S- ids | Q+ ids | Q- ids

with ids separated by single spaces.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

from .errors import NoEligibleLabelError, ParseError
from .graph import LabelMatrix


@dataclass(frozen=True)
class TaskShape:
    k_support_pos: int
    k_support_neg: int
    k_query_pos: int
    k_query_neg: int

    def __post_init__(self):
        if min(self.k_support_pos, self.k_support_neg, self.k_query_pos, self.k_query_neg) < 1:
            raise ValueError(f"all task counts must be >= 1: {self}")

    @classmethod
    def symmetric(cls, k_pos: int, k_neg: int) -> "TaskShape":
        return cls(k_pos, k_neg, k_pos, k_neg)

    @property
    def n_pos(self) -> int:
        return self.k_support_pos + self.k_query_pos

    @property
    def n_neg(self) -> int:
        return self.k_support_neg + self.k_query_neg

    def __str__(self) -> str:
        return f"({self.k_support_pos},{self.k_support_neg},{self.k_query_pos},{self.k_query_neg})"


@dataclass(frozen=True)
class Task:
    label_id: int
    support_pos: np.ndarray
    support_neg: np.ndarray
    query_pos: np.ndarray
    query_neg: np.ndarray

    @property
    def queries(self) -> np.ndarray:
        return np.concatenate([self.query_pos, self.query_neg])

    @property
    def truths(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.query_pos)), np.zeros(len(self.query_neg))])

    def nodes(self) -> np.ndarray:
        return np.concatenate([self.support_pos, self.support_neg, self.query_pos, self.query_neg])

    def check(self, labels: LabelMatrix) -> None:
        """Raise ``ValueError`` unless the task invariants hold under ``labels``."""
        mask = labels.mask(self.label_id)
        for name in ("support_pos", "support_neg", "query_pos", "query_neg"):
            ids = getattr(self, name)
            if len(np.unique(ids)) != len(ids):
                raise ValueError(f"task label {self.label_id}: duplicate ids in {name}")
            if len(ids) and (ids.min() < 0 or ids.max() >= labels.node_count):
                raise ValueError(f"task label {self.label_id}: node out of range in {name}")
            want = name.endswith("pos")
            if not np.all(mask[ids] == want):
                raise ValueError(f"task label {self.label_id}: {name} has wrong-polarity nodes")
        if np.intersect1d(self.support_pos, self.query_pos).size:
            raise ValueError(f"task label {self.label_id}: positive support and query overlap")
        if np.intersect1d(self.support_neg, self.query_neg).size:
            raise ValueError(f"task label {self.label_id}: negative support and query overlap")


def eligible_labels(
    labels: LabelMatrix, pool: Iterable[int], shape: TaskShape, node_count: int | None = None
) -> list[int]:
    """Labels in ``pool`` with enough positives and negatives for ``shape``, sorted."""
    n = labels.node_count if node_count is None else node_count
    out = []
    for y in sorted(pool):
        n_pos = len(labels.positives[y])
        if n_pos >= shape.n_pos and n - n_pos >= shape.n_neg:
            out.append(y)
    return out


def _sample_negatives(mask: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(mask)
    n_neg = n - int(mask.sum())
    if n_neg < 4 * k:
        return rng.choice(np.flatnonzero(~mask), size=k, replace=False)
    # rejection sampling avoids materializing the complement for large graphs
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < k:
        for v in rng.integers(0, n, size=2 * (k - len(chosen))).tolist():
            if not mask[v] and v not in seen:
                seen.add(v)
                chosen.append(v)
                if len(chosen) == k:
                    break
    return np.array(chosen, dtype=np.int64)


def sample_task(
    labels: LabelMatrix,
    pool: Iterable[int],
    shape: TaskShape,
    rng: np.random.Generator,
    eligible: list[int] | None = None,
) -> Task:
    """Draw one task: a label uniformly from the eligible part of ``pool``,
    then disjoint support/query node sets uniformly without replacement.

    Pass a precomputed ``eligible`` list to skip the eligibility scan.
    """
    if eligible is None:
        eligible = eligible_labels(labels, pool, shape)
    if not eligible:
        raise NoEligibleLabelError(f"no label in the pool can fill task shape {shape}")
    y = eligible[int(rng.integers(len(eligible)))]
    pos = rng.choice(labels.positives[y], size=shape.n_pos, replace=False)
    neg = _sample_negatives(labels.mask(y), shape.n_neg, rng)
    kp, kn = shape.k_support_pos, shape.k_support_neg
    return Task(
        label_id=y,
        support_pos=np.asarray(pos[:kp], dtype=np.int64),
        support_neg=np.asarray(neg[:kn], dtype=np.int64),
        query_pos=np.asarray(pos[kp:], dtype=np.int64),
        query_neg=np.asarray(neg[kn:], dtype=np.int64),
    )


def sample_tasks(
    labels: LabelMatrix, pool: Iterable[int], shape: TaskShape, n: int, rng: np.random.Generator
) -> list[Task]:
    eligible = eligible_labels(labels, pool, shape)
    return [sample_task(labels, pool, shape, rng, eligible=eligible) for _ in range(n)]


def _ids(arr) -> str:
    return " ".join(str(int(v)) for v in arr)


def write_tasks(tasks: Iterable[Task], stream: TextIO) -> int:
    count = 0
    for t in tasks:
        stream.write(
            f"{t.label_id} | {_ids(t.support_pos)} | {_ids(t.support_neg)} | "
            f"{_ids(t.query_pos)} | {_ids(t.query_neg)}\n"
        )
        count += 1
    return count


def read_tasks(stream: Iterable[str]) -> list[Task]:
    """Parse a task file.  Query sides may be empty; support sides may not."""
    tasks = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("|")
        if len(fields) != 5:
            raise ParseError(f"expected 5 '|'-separated fields, got {len(fields)}", lineno)
        try:
            label = int(fields[0])
            sets = [np.array([int(t) for t in f.split()], dtype=np.int64) for f in fields[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if len(sets[0]) == 0 or len(sets[1]) == 0:
            raise ParseError("support sets must be nonempty", lineno)
        tasks.append(Task(label, *sets))
    return tasks
