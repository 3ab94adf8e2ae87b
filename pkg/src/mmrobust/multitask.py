"""Weighted three-task loss and per-task classification losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import forward_batch


@dataclass(frozen=True)
class TaskWeights:
    """``lambda1`` modality-1-only, ``lambda2`` modality-2-only, ``lambda3`` joint."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        w = (self.lambda1, self.lambda2, self.lambda3)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError("task weights must be non-negative with at least one positive")

    def scaled(self, c):
        return TaskWeights(self.lambda1 * c, self.lambda2 * c, self.lambda3 * c)


BASELINE_WEIGHTS = TaskWeights(0.0, 0.0, 1.0)


@dataclass
class LossReport:
    loss_m1: float
    loss_m2: float
    loss_joint: float
    total: float
    count_m1: int
    count_m2: int
    count_joint: int

    def row(self):
        return [self.loss_m1, self.loss_m2, self.loss_joint, self.total]


def _check_labels(labels, n_classes, task_type):
    labels = np.asarray(labels)
    if task_type == "multiclass":
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"label out of range [0, {n_classes})")
    elif task_type == "binary":
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("binary labels must be 0 or 1")
    elif task_type == "multilabel":
        if labels.ndim != 2 or labels.shape[1] != n_classes or not np.isin(labels, (0, 1)).all():
            raise ValueError(f"multilabel labels must be 0/1 rows of length {n_classes}")
    else:
        raise ValueError(f"unknown task type {task_type!r}")
    return labels


def per_sample_loss(logits, labels, task_type):
    """``logits [B, C]`` -> loss per sample ``[B]``.

    multilabel: mean BCE over classes; multiclass: softmax cross-entropy;
    binary: BCE on the single logit.
    """
    B, C = logits.shape
    labels = _check_labels(labels, C, task_type)
    if task_type == "multiclass":
        return -T.log_softmax(logits)[np.arange(B), labels]
    if task_type == "binary":
        if C != 1:
            raise ValueError("binary task expects one logit per sample")
        return T.bce_with_logits(logits, labels.reshape(B, 1).astype(np.float64)).reshape(B)
    return T.bce_with_logits(logits, labels.astype(np.float64)).mean(axis=1)


def task_loss(logits, label, task_type):
    logits = T.as_tensor(logits)
    lab = np.asarray(label)
    return per_sample_loss(logits.reshape(1, -1), lab[None] if lab.ndim else lab.reshape(1),
                           task_type).sum()


def total_loss(batch, params, cfg, enc, weights: TaskWeights, fusion):
    """Weighted multi-task loss on a collated batch.

    Modality-k-only loss averages over samples with modality k present; the
    joint loss averages over samples with both present. A task with no
    contributing sample adds 0.
    Returns ``(loss Tensor, LossReport)``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    contrib = {"m1": batch.present1, "m2": batch.present2, "joint": batch.complete}
    lam = {"m1": weights.lambda1, "m2": weights.lambda2, "joint": weights.lambda3}
    active = {k for k in contrib if lam[k] > 0 and contrib[k].any()}
    streams = []
    if "joint" in active:
        streams.append("joint")
    if active & {"m1", "m2"}:
        streams.append("single")
    values = {k: 0.0 for k in contrib}
    total = T.Tensor(0.0)
    if streams:
        logits = forward_batch(params, cfg, enc, batch, fusion, streams=tuple(streams))
        for k in ("m1", "m2", "joint"):
            if k not in active:
                continue
            w = contrib[k] / contrib[k].sum()
            lk = (per_sample_loss(logits[k], batch.labels, cfg.task_type) * w).sum()
            values[k] = lk.item()
            total = total + lam[k] * lk
    report = LossReport(values["m1"], values["m2"], values["joint"], total.item(),
                        int(contrib["m1"].sum()), int(contrib["m2"].sum()),
                        int(contrib["joint"].sum()))
    return total, report
