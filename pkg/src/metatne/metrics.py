"""Novel-label inference and the AUC / F1 / Recall evaluation protocol."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np
from scipy.stats import rankdata

from .classifier import predict_tasks
from .errors import EvaluationError, NoEligibleLabelError, NodeRangeError, UndefinedMetricError
from .tasks import Task


@dataclass
class TaskResult:
    task_id: int
    scores: np.ndarray
    truths: np.ndarray


def auc(scores, truths) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie), via average ranks."""
    scores = np.asarray(scores, dtype=float)
    truths = np.asarray(truths).astype(bool)
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[truths].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_recall(scores, truths, threshold: float = 0.5) -> tuple[float, float]:
    pred = np.asarray(scores, dtype=float) >= threshold
    truths = np.asarray(truths).astype(bool)
    tp = int(np.sum(pred & truths))
    fp = int(np.sum(pred & ~truths))
    fn = int(np.sum(~pred & truths))
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, recall


def _check_nodes(task: Task, node_count: int) -> None:
    nodes = task.nodes()
    if len(nodes) and (nodes.min() < 0 or nodes.max() >= node_count):
        raise NodeRangeError(f"task for label {task.label_id} references a node outside [0, {node_count})")


def classify_tasks(model, tasks: Sequence[Task], task_agnostic: bool = False) -> list[TaskResult]:
    """Score every query of every task (positives first, then negatives).

    ``task_agnostic`` skips the transformation and compares raw embeddings
    to plain support means.
    """
    emb = model.emb.center
    for t in tasks:
        _check_nodes(t, emb.shape[0])
    probs = predict_tasks(emb, tasks, None if task_agnostic else model.params)
    return [TaskResult(i, p, t.truths) for i, (t, p) in enumerate(zip(tasks, probs))]


def classify_task(model, task: Task, task_agnostic: bool = False) -> TaskResult:
    return classify_tasks(model, [task], task_agnostic)[0]


@dataclass
class TrialMetrics:
    auc: float
    f1: float
    recall: float
    auc_skipped: int


def score_results(results: Sequence[TaskResult], threshold: float = 0.5) -> TrialMetrics:
    """Macro-average per-task metrics; AUC skips single-class tasks."""
    aucs, f1s, recalls = [], [], []
    skipped = 0
    for r in results:
        try:
            aucs.append(auc(r.scores, r.truths))
        except UndefinedMetricError:
            skipped += 1
        f, rec = f1_recall(r.scores, r.truths, threshold)
        f1s.append(f)
        recalls.append(rec)
    mean_auc = float(np.mean(aucs)) if aucs else float("nan")
    return TrialMetrics(mean_auc, float(np.mean(f1s)), float(np.mean(recalls)), skipped)


@dataclass
class MetricsReport:
    auc: tuple[float, float]
    f1: tuple[float, float]
    recall: tuple[float, float]
    n_trials: int
    n_tasks: int
    auc_skipped: int = 0
    trials: list[TrialMetrics] = field(default_factory=list, repr=False)

    def table(self) -> str:
        lines = [f"{'metric':<8}{'mean':>10}{'std':>10}"]
        for name in ("auc", "f1", "recall"):
            mean, std = getattr(self, name)
            lines.append(f"{name:<8}{mean:>10.4f}{std:>10.4f}")
        lines.append(f"trials={self.n_trials} tasks_per_trial={self.n_tasks} auc_skipped={self.auc_skipped}")
        return "\n".join(lines)

    def write(self, stream: TextIO) -> None:
        """One ``key=value`` line per metric."""
        for name in ("auc", "f1", "recall"):
            mean, std = getattr(self, name)
            stream.write(
                f"metric={name} mean={mean:.6f} std={std:.6f} "
                f"n_tasks={self.n_tasks} n_trials={self.n_trials} auc_skipped={self.auc_skipped}\n"
            )


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def evaluate(
    model,
    task_source: Callable[[int, np.random.Generator], list[Task]] | Sequence[Task],
    n_tasks: int,
    n_trials: int,
    seed: int | np.random.Generator,
    threshold: float = 0.5,
    task_agnostic: bool = False,
) -> MetricsReport:
    """Average metrics over ``n_trials`` trials of ``n_tasks`` tasks each.

    ``task_source`` is either a frozen task list (reused by every trial) or
    a callable ``(n, rng) -> tasks``.  The model is fixed; only the task
    draw changes between trials.
    """
    if n_tasks < 1 or n_trials < 1:
        raise ValueError("n_tasks and n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    for _ in range(n_trials):
        if callable(task_source):
            try:
                tasks = task_source(n_tasks, rng)
            except NoEligibleLabelError as exc:
                raise EvaluationError(str(exc)) from exc
        else:
            tasks = list(task_source)
        if not tasks:
            raise EvaluationError("no tasks to evaluate")
        trials.append(score_results(classify_tasks(model, tasks, task_agnostic), threshold))
    return MetricsReport(
        auc=_mean_std([t.auc for t in trials]),
        f1=_mean_std([t.f1 for t in trials]),
        recall=_mean_std([t.recall for t in trials]),
        n_trials=n_trials,
        n_tasks=len(tasks),
        auc_skipped=sum(t.auc_skipped for t in trials),
        trials=trials,
    )
