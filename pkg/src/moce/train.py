"""Training loop: AdamW with cosine annealing, AUC-ROC, metrics logging.

Randomness is counter-based so that every draw is addressable: routing
noise for processing block b at optimizer step s comes from a Philox
stream keyed (seed, b) at counter s, and the epoch shuffle from a separate
stream keyed (seed, shuffle) at counter epoch. Resuming from (seed, epoch,
step) therefore reproduces the exact remaining run.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .encoder import BatchedGraph, batch_graphs
from .experts import TaskDescriptor
from .losses import LossToggles
from .model import ForwardResult, Model, model_loss
from .molgraph import DatasetRecord


class NonFiniteGradient(RuntimeError):
    """A gradient contained nan or inf; the optimizer step was aborted."""


_SHUFFLE_STREAM = 0xF1D0  # key word reserved for epoch shuffling


def shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=[seed, _SHUFFLE_STREAM], counter=[0, 0, 0, epoch]))


def noise_rngs(seed: int, step: int, num_blocks: int) -> list[np.random.Generator]:
    return [
        np.random.Generator(np.random.Philox(key=[seed, b],
                                              counter=[0, 0, 0, step]))
        for b in range(num_blocks)
    ]


@dataclass
class OptimizerState:
    """Decoupled-weight-decay Adam moments, keyed by parameter name."""

    lr: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, Tensor], lr: float = 0.01,
               weight_decay: float = 0.01) -> "OptimizerState":
        state = cls(lr=lr, weight_decay=weight_decay)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float | None = None) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Every gradient is checked before anything mutates, so a non-finite
    batch leaves parameters and moments untouched.
    """
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    if lr is None:
        lr = state.lr
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= lr * (update + state.weight_decay * p.data)


@dataclass
class ScheduleConfig:
    """Cosine annealing bounds."""

    total_steps: int
    min_lr_fraction: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.min_lr_fraction <= 1.0:
            raise ValueError(
                f"min_lr_fraction must be in [0, 1], got {self.min_lr_fraction}")


def cosine_lr(step: int, schedule: ScheduleConfig, base_lr: float) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(
            f"step {step} outside [0, {schedule.total_steps}]")
    lo = base_lr * schedule.min_lr_fraction
    return lo + 0.5 * (base_lr - lo) * (
        1.0 + np.cos(np.pi * step / schedule.total_steps))


def auc_roc(scores, labels) -> float | None:
    """Probability a random positive outscores a random negative.

    Mann-Whitney rank form with average ranks for ties (a tied pair counts
    one half). Returns None when only one class is present; the undefined
    case is never reported as a number.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    below = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ranks = below[inverse] + (counts[inverse] + 1) / 2.0
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class EpochMetrics:
    """One epoch's worth of reporting."""

    epoch: int
    split: str
    per_task_auc: dict[str, float | None]
    mean_auc: float | None
    loss_means: dict[str, float]
    max_gate_share: float
    importance_cv: float
    load_cv: float
    skipped_batches: int = 0


def make_batch(records: list[DatasetRecord],
               tasks: dict[str, TaskDescriptor],
               dtype=np.float64) -> tuple[BatchedGraph, Tensor, np.ndarray, list[str]]:
    """Featurized records -> (graph batch, task matrix, labels, task ids)."""
    batch = batch_graphs([r.graph for r in records])
    t = np.stack([tasks[r.task_id].embedding for r in records]).astype(dtype)
    labels = np.array([r.label for r in records], dtype=dtype)
    ids = [r.task_id for r in records]
    return batch, Tensor(t), labels, ids


def _gate_statistics(result: ForwardResult) -> tuple[float, float, float]:
    """Mean max-gate share, importance CV, and load CV over the blocks."""
    shares = []
    imp_cvs = []
    lod_cvs = []
    for res in result.layers:
        gates = res.route.gates.data
        shares.append(gates.max(axis=1).mean())
        for matrix, sink in ((gates, imp_cvs), (res.route.p_choose.data, lod_cvs)):
            totals = matrix.sum(axis=0)
            mean = totals.mean()
            sink.append(float(totals.std() / (mean + 1e-10)))
    return float(np.mean(shares)), float(np.mean(imp_cvs)), float(np.mean(lod_cvs))


def _chunks(seq, size: int):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


@dataclass
class TrainSettings:
    """Loop hyperparameters (the model's shape lives in ModelConfig)."""

    batch_size: int = 512
    epochs: int = 50
    seed: int = 0
    lr: float = 0.01
    weight_decay: float = 0.01
    beta: float = 0.1
    min_lr_fraction: float = 0.0
    toggles: LossToggles = LossToggles()


def train_epoch(model: Model, records: list[DatasetRecord],
                tasks: dict[str, TaskDescriptor], settings: TrainSettings,
                opt: OptimizerState, schedule: ScheduleConfig, epoch: int,
                start_step: int) -> tuple[EpochMetrics, int]:
    """One pass over the training records.

    Records are shuffled by the epoch-keyed stream, batches mix tasks
    freely, and routing noise is on. Returns the metrics and the next
    global step. Batches whose gradients go non-finite are skipped (the
    optimizer state is untouched) and counted.
    """
    params = model.parameters()
    order = shuffle_rng(settings.seed, epoch).permutation(len(records))
    shuffled = [records[i] for i in order]

    step = start_step
    skipped = 0
    loss_sums: dict[str, float] = {}
    share_sum = imp_sum = lod_sum = 0.0
    num_batches = 0
    per_task_scores: dict[str, list] = {}
    per_task_labels: dict[str, list] = {}

    for chunk in _chunks(shuffled, settings.batch_size):
        batch, t_matrix, labels, ids = make_batch(
            chunk, tasks, dtype=model.integrator.bias.dtype)
        rngs = noise_rngs(settings.seed, step, len(model.blocks))
        with Tape() as tape:
            result = model.forward(batch, t_matrix, noise_on=True, rngs=rngs)
            breakdown = model_loss(model, result, labels, settings.beta,
                                   settings.toggles)
            leaf_grads = tape.backward(breakdown.overall)
        grads = {
            name: leaf_grads.get(p, np.zeros_like(p.data))
            for name, p in params.items()
        }
        lr_now = cosine_lr(min(step, schedule.total_steps), schedule,
                           settings.lr)
        try:
            adamw_step(params, grads, opt, lr=lr_now)
        except NonFiniteGradient:
            skipped += 1
            step += 1
            continue
        step += 1
        num_batches += 1
        for key, value in breakdown.floats().items():
            loss_sums[key] = loss_sums.get(key, 0.0) + value
        share, imp_cv, lod_cv = _gate_statistics(result)
        share_sum += share
        imp_sum += imp_cv
        lod_sum += lod_cv
        for i, task_id in enumerate(ids):
            per_task_scores.setdefault(task_id, []).append(
                result.logits.data[i])
            per_task_labels.setdefault(task_id, []).append(labels[i])

    denom = max(num_batches, 1)
    per_task_auc = {
        task_id: auc_roc(per_task_scores[task_id], per_task_labels[task_id])
        for task_id in sorted(per_task_scores)
    }
    defined = [a for a in per_task_auc.values() if a is not None]
    metrics = EpochMetrics(
        epoch=epoch,
        split="train",
        per_task_auc=per_task_auc,
        mean_auc=float(np.mean(defined)) if defined else None,
        loss_means={k: v / denom for k, v in loss_sums.items()},
        max_gate_share=share_sum / denom,
        importance_cv=imp_sum / denom,
        load_cv=lod_sum / denom,
        skipped_batches=skipped,
    )
    return metrics, step


def evaluate(model: Model, records: list[DatasetRecord],
             tasks: dict[str, TaskDescriptor], settings: TrainSettings,
             epoch: int = 0, split: str = "valid") -> EpochMetrics:
    """Noise-off evaluation: per-task AUC, loss means, gate statistics."""
    loss_sums: dict[str, float] = {}
    share_sum = imp_sum = lod_sum = 0.0
    num_batches = 0
    per_task_scores: dict[str, list] = {}
    per_task_labels: dict[str, list] = {}

    for chunk in _chunks(records, settings.batch_size):
        batch, t_matrix, labels, ids = make_batch(
            chunk, tasks, dtype=model.integrator.bias.dtype)
        result = model.forward(batch, t_matrix, noise_on=False)
        breakdown = model_loss(model, result, labels, settings.beta,
                               settings.toggles)
        num_batches += 1
        for key, value in breakdown.floats().items():
            loss_sums[key] = loss_sums.get(key, 0.0) + value
        share, imp_cv, lod_cv = _gate_statistics(result)
        share_sum += share
        imp_sum += imp_cv
        lod_sum += lod_cv
        for i, task_id in enumerate(ids):
            per_task_scores.setdefault(task_id, []).append(
                result.logits.data[i])
            per_task_labels.setdefault(task_id, []).append(labels[i])

    denom = max(num_batches, 1)
    per_task_auc = {
        task_id: auc_roc(per_task_scores[task_id], per_task_labels[task_id])
        for task_id in sorted(per_task_scores)
    }
    defined = [a for a in per_task_auc.values() if a is not None]
    return EpochMetrics(
        epoch=epoch,
        split=split,
        per_task_auc=per_task_auc,
        mean_auc=float(np.mean(defined)) if defined else None,
        loss_means={k: v / denom for k, v in loss_sums.items()},
        max_gate_share=share_sum / denom,
        importance_cv=imp_sum / denom,
        load_cv=lod_sum / denom,
    )


METRICS_HEADER = ["epoch", "task_id", "split", "auc", "base", "att", "exp",
                  "imp", "lod", "max_gate_share"]


class MetricsLog:
    """Comma-separated metrics file, one row per (epoch, task, split).

    The ``auc`` field is empty when undefined (single-class task). The
    ``task_id`` "__mean__" row carries the cross-task mean.
    """

    def __init__(self, path, append: bool = False):
        self.path = path
        if append and os.path.exists(path):
            return
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)

    def append(self, metrics: EpochMetrics) -> None:
        losses = metrics.loss_means
        with open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh)
            rows = list(metrics.per_task_auc.items())
            rows.append(("__mean__", metrics.mean_auc))
            for task_id, auc in rows:
                writer.writerow([
                    metrics.epoch, task_id, metrics.split,
                    "" if auc is None else f"{auc:.10f}",
                    f"{losses.get('base', 0.0):.10f}",
                    f"{losses.get('att', 0.0):.10f}",
                    f"{losses.get('exp', 0.0):.10f}",
                    f"{losses.get('imp', 0.0):.10f}",
                    f"{losses.get('lod', 0.0):.10f}",
                    f"{metrics.max_gate_share:.10f}",
                ])


def read_metrics_log(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
