"""Alternating optimization of the structural and meta-learning objectives.

At step ``s`` a structural phase runs with probability
``tau(s) = 1 / (1 + gamma * floor(s / decay_period))`` and a meta phase
otherwise.  Both phases use Adam; embedding rows are updated lazily so a
phase only moves the rows its batch touched.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .classifier import EpisodeGrads, episode_loss_and_grads
from .errors import ConfigError, MetaTNEError, NoEligibleLabelError, NumericalError
from .graph import Graph, LabelMatrix, LabelSplit
from .metrics import classify_tasks, score_results
from .rng import substream
from .structural import (
    EmbeddingMatrix,
    NoiseDistribution,
    build_noise,
    draw_negatives,
    init_embeddings,
    sample_edge_batch,
    sgns_loss_and_grads,
    sgns_step,
)
from .tasks import TaskShape, eligible_labels, sample_task, sample_tasks
from .transform import TransformConfig, TransformParams, init_transform

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    gamma: float = 0.1
    decay_period: int = 1000

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if self.decay_period < 1:
            raise ConfigError("decay_period must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    n1: int = 1024
    n2: int = 64
    n_neg: int = 5
    lr_struct: float = 1e-3
    lr_meta: float = 1e-3
    lam: float = 0.01
    shape: TaskShape = TaskShape(10, 20, 10, 20)
    seed: int = 0
    noise_exponent: float = 0.75
    struct_optimizer: str = "adam"
    eval_every: int | None = None
    n_val_tasks: int = 200
    threshold: float = 0.5
    threads: int = 1
    log_every: int = 100
    max_skips: int = 10

    def __post_init__(self):
        if min(self.n1, self.n2, self.n_neg, self.n_val_tasks, self.threads, self.log_every) < 1:
            raise ConfigError("batch sizes, counts and threads must be >= 1")
        if self.lr_struct <= 0 or self.lr_meta <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.struct_optimizer not in ("adam", "sgd"):
            raise ConfigError("struct_optimizer must be 'adam' or 'sgd'")


def tau(step: int, cfg: ScheduleConfig) -> float:
    """Probability of running the structural phase at ``step``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return 1.0 / (1.0 + cfg.gamma * (step // cfg.decay_period))


def choose_phase(step: int, cfg: ScheduleConfig, rng: np.random.Generator) -> str:
    return "struct" if rng.random() < tau(step, cfg) else "meta"


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    rows: dict[str, np.ndarray] | None = None,
) -> bool:
    """Bias-corrected Adam step applied in place.

    For names listed in ``rows`` the gradient covers only those (unique)
    rows and only they are updated, with their moments, at the shared step
    count.  Returns ``False`` and leaves everything untouched when a gradient
    is not finite.
    """
    rows = rows or {}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient, Adam step skipped (%d so far)", state.skipped)
        return False
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        idx = rows.get(name)
        if idx is None:
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        else:
            m_r = state.beta1 * m[idx] + (1.0 - state.beta1) * g
            v_r = state.beta2 * v[idx] + (1.0 - state.beta2) * (g * g)
            m[idx] = m_r
            v[idx] = v_r
            p[idx] -= lr * (m_r / bc1) / (np.sqrt(v_r / bc2) + state.eps)
    return True


@dataclass
class Model:
    emb: EmbeddingMatrix
    params: TransformParams
    config: dict = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.emb.copy(), self.params.copy(), dict(self.config))


def init_model(node_count: int, transform_cfg: TransformConfig, seed: int, config: dict | None = None) -> Model:
    emb = init_embeddings(node_count, transform_cfg.d, substream(seed, "init"))
    params = init_transform(transform_cfg, substream(seed, "init-transform"))
    return Model(emb, params, dict(config or {}))


def _sum_rows(ids: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows, inv = np.unique(ids, return_inverse=True)
    out = np.zeros((len(rows), grads.shape[-1]))
    np.add.at(out, inv, grads.reshape(-1, grads.shape[-1]))
    return rows, out


def structural_phase(
    model: Model,
    graph: Graph,
    noise: NoiseDistribution,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: AdamState,
) -> float:
    """Sample ``n1`` neighbor pairs and update center/context rows."""
    pairs = sample_edge_batch(graph, cfg.n1, rng)
    if cfg.struct_optimizer == "sgd":
        return sgns_step(model.emb, pairs, noise, cfg.n_neg, cfg.lr_struct, rng)
    negs = draw_negatives(noise, pairs, cfg.n_neg, rng)
    losses, g_c, g_p, g_n = sgns_loss_and_grads(model.emb, pairs, negs)
    loss = float(losses.mean())
    if not math.isfinite(loss):
        raise NumericalError("non-finite SGNS loss")
    scale = 1.0 / len(pairs)
    c_rows, c_grad = _sum_rows(pairs[:, 0], g_c * scale)
    x_rows, x_grad = _sum_rows(
        np.concatenate([pairs[:, 1], negs.ravel()]),
        np.concatenate([g_p, g_n.reshape(-1, model.emb.dim)]) * scale,
    )
    ok = adam_update(
        opt,
        {"center": model.emb.center, "context": model.emb.context},
        {"center": c_grad, "context": x_grad},
        cfg.lr_struct,
        rows={"center": c_rows, "context": x_rows},
    )
    if not ok:
        raise NumericalError("structural step skipped")
    return loss


def _episode_threaded(model, tasks, cfg, rng, threads) -> EpisodeGrads:
    chunks = [c for c in np.array_split(np.arange(len(tasks)), threads) if len(c)]
    rngs = rng.spawn(len(chunks))

    def work(i):
        part = [tasks[j] for j in chunks[i]]
        eg = episode_loss_and_grads(model.emb.center, part, model.params, 0.0, True, rngs[i])
        w = len(part) / len(tasks)
        return eg, w

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(work, range(len(chunks))))
    grads = model.params.zeros_like()
    g_arr = grads.named_arrays()
    loss = 0.0
    ids, dx = [], []
    # reduce in chunk order so the result does not depend on thread timing
    for eg, w in results:
        loss += w * eg.loss
        for name, arr in eg.params.named_arrays().items():
            g_arr[name] += w * arr
        ids.append(eg.rows)
        dx.append(w * eg.row_grads)
    if cfg.lam:
        loss += cfg.lam * model.params.sq_norm()
        for name, arr in model.params.named_arrays().items():
            g_arr[name] += 2.0 * cfg.lam * arr
    rows, row_grads = _sum_rows(np.concatenate(ids), np.concatenate(dx))
    return EpisodeGrads(loss, grads, rows, row_grads)


def meta_phase(
    model: Model,
    labels: LabelMatrix,
    eligible: list[int],
    cfg: TrainConfig,
    task_rng: np.random.Generator,
    dropout_rng: np.random.Generator,
    opt: AdamState,
) -> float:
    """Sample ``n2`` tasks, then update the transform and the touched rows of U."""
    tasks = [sample_task(labels, eligible, cfg.shape, task_rng, eligible=eligible) for _ in range(cfg.n2)]
    if cfg.threads > 1:
        eg = _episode_threaded(model, tasks, cfg, dropout_rng, cfg.threads)
    else:
        eg = episode_loss_and_grads(model.emb.center, tasks, model.params, cfg.lam, True, dropout_rng)
    params = model.params.named_arrays()
    grads = eg.params.named_arrays()
    params["center"] = model.emb.center
    grads["center"] = eg.row_grads
    ok = adam_update(opt, params, grads, cfg.lr_meta, rows={"center": eg.rows})
    if not ok:
        raise NumericalError("meta step skipped")
    model.params.mark_updated()
    return eg.loss


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_step: int | None
    phase_counts: dict


class TrainingAborted(MetaTNEError):
    def __init__(self, message: str, model: Model):
        super().__init__(message)
        self.model = model


def validate(model: Model, tasks, threshold: float = 0.5):
    return score_results(classify_tasks(model, tasks), threshold)


def train(
    graph: Graph,
    labels: LabelMatrix,
    split: LabelSplit,
    transform_cfg: TransformConfig,
    train_cfg: TrainConfig,
    schedule: ScheduleConfig,
    model: Model | None = None,
    on_log: Callable[[int, str, float, float], None] | None = None,
) -> TrainResult:
    """Run the alternating schedule for ``schedule.total_steps`` steps.

    Validation runs every ``eval_every`` steps (default: the decay period)
    and after the last step; the returned model is the one with the best
    validation F1, or the final one if validation is impossible.
    """
    seed = train_cfg.seed
    if model is None:
        model = init_model(graph.node_count, transform_cfg, seed)
    if model.emb.node_count != graph.node_count:
        raise ConfigError(f"model has {model.emb.node_count} nodes, graph has {graph.node_count}")
    if schedule.total_steps == 0:
        return TrainResult(model, [], None, {"struct": 0, "meta": 0})

    eligible = eligible_labels(labels, split.known, train_cfg.shape)
    if not eligible:
        raise NoEligibleLabelError(f"no training label can fill task shape {train_cfg.shape}")
    noise = build_noise(graph, train_cfg.noise_exponent)

    rng_sched = substream(seed, "schedule")
    rng_struct = substream(seed, "struct")
    rng_tasks = substream(seed, "tasks")
    rng_drop = substream(seed, "dropout")
    struct_opt, meta_opt = AdamState(), AdamState()

    val_tasks = []
    if eligible_labels(labels, split.validation, train_cfg.shape):
        val_tasks = sample_tasks(labels, split.validation, train_cfg.shape,
                                 train_cfg.n_val_tasks, substream(seed, "validation"))
    else:
        log.warning("no validation label fits shape %s; keeping the final model", train_cfg.shape)
    eval_every = train_cfg.eval_every or schedule.decay_period

    history: list[dict] = []
    best_f1, best_step, best = -1.0, None, None
    counts = {"struct": 0, "meta": 0}
    consecutive_skips = 0

    for step in range(schedule.total_steps):
        t = tau(step, schedule)
        phase = "struct" if rng_sched.random() < t else "meta"
        try:
            if phase == "struct":
                loss = structural_phase(model, graph, noise, train_cfg, rng_struct, struct_opt)
            else:
                loss = meta_phase(model, labels, eligible, train_cfg, rng_tasks, rng_drop, meta_opt)
            consecutive_skips = 0
        except NumericalError as exc:
            consecutive_skips += 1
            loss = float("nan")
            log.warning("step %d (%s): %s", step, phase, exc)
            if consecutive_skips > train_cfg.max_skips:
                raise TrainingAborted(
                    f"aborting after {consecutive_skips} consecutive skipped steps", model
                ) from exc
        counts[phase] += 1
        if on_log is not None and step % train_cfg.log_every == 0:
            on_log(step, phase, t, loss)

        last = step == schedule.total_steps - 1
        if val_tasks and ((step + 1) % eval_every == 0 or last):
            m = validate(model, val_tasks, train_cfg.threshold)
            history.append({"step": step + 1, "val_auc": m.auc, "val_f1": m.f1, "val_recall": m.recall})
            if m.f1 > best_f1:
                best_f1, best_step, best = m.f1, step + 1, model.copy()

    final = best if best is not None else model
    return TrainResult(final, history, best_step, counts)
