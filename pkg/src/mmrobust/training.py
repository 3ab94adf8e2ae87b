"""Minibatch Adam training with a fixed fusion policy."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .encoder import collate
from .multitask import TaskWeights, total_loss
from .optim import AdamState, adam_step
from .tensor import Tape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 3e-5
    weight_decay: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    modality_dropout: float = 0.0
    dropout_modality: int = 0  # 0: pick one of the two at random per sample
    seed: int = 0


class TrainingDiverged(RuntimeError):
    def __init__(self, step, cause):
        self.step = step
        super().__init__(f"training diverged at step {step}: {cause}")


def full_grads(params, leaf_grads):
    return {name: leaf_grads[p] if p in leaf_grads else np.zeros_like(p.data)
            for name, p in params.items()}


def gradient_step(params, cfg, enc, batch, weights, fusion):
    with Tape() as tape:
        loss, report = total_loss(batch, params, cfg, enc, weights, fusion)
    if not np.isfinite(report.total):
        raise FloatingPointError("non-finite loss")
    if loss.requires_grad:
        grads = full_grads(params, tape.backward(loss))
    else:
        grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    return grads, report


def _hide_draw(rng, n, tcfg):
    if tcfg.modality_dropout <= 0:
        return None
    hit = rng.random(n) < tcfg.modality_dropout
    which = (rng.integers(1, 3, size=n) if tcfg.dropout_modality == 0
             else np.full(n, tcfg.dropout_modality))
    return np.where(hit, which, 0)


def fit(params, cfg, enc, train, fusion, weights: TaskWeights, tcfg: TrainConfig,
        on_step=None, snapshot=None):
    """Train ``params`` in place. Returns the list of per-step LossReports.

    ``on_step(step, report)`` is called after each update. On a non-finite
    loss or gradient, ``snapshot`` (if given) receives the last good params
    before :class:`TrainingDiverged` is raised.
    """
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps,
                      weight_decay=tcfg.weight_decay)
    reports = []
    step = 0
    n = len(train)
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            batch = collate([train[i] for i in idx], enc, _hide_draw(rng, len(idx), tcfg))
            good = {k: p.data.copy() for k, p in params.items()} if snapshot else None
            try:
                grads, report = gradient_step(params, cfg, enc, batch, weights, fusion)
                adam_step(params, grads, state)
            except FloatingPointError as exc:
                if snapshot:
                    snapshot(good)
                raise TrainingDiverged(step, exc) from exc
            step += 1
            reports.append(report)
            if on_step:
                on_step(step, report)
        log.debug("epoch %d done, last total %.4f", epoch, reports[-1].total if reports else float("nan"))
    return reports
