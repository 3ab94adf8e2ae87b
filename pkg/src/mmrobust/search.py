"""Differentiable search over the fusion layer.

Policy parameters ``alpha`` (one per layer) give a soft policy
``softmax(alpha)``; its straight-through one-hot picks a column of the
lower-triangular all-ones matrix ``Q``, i.e. the suffix-ones fusion vector
that fuses from the selected layer to the last one. Gradients reach
``alpha`` because the model blends fused and unfused attention per layer
with the fusion vector as gate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import collate
from .model import init_params
from .multitask import TaskWeights, total_loss
from .optim import AdamState, adam_step, sgd_step
from .tensor import Tape, Tensor
from .training import TrainConfig, fit, full_grads

log = logging.getLogger(__name__)


def policy_matrix(M):
    """``Q[i, j] = 1`` iff ``i >= j``."""
    Q = np.tril(np.ones((M, M)))
    Q.setflags(write=False)
    return Q


def argmax_tiebreak(soft):
    """0-based argmax; ties go to the lowest index (earliest fusion)."""
    soft = np.asarray(soft)
    return int(np.flatnonzero(soft == soft.max())[0])


@dataclass
class FusionVector:
    s: Tensor          # suffix-ones 0/1 vector (carries the straight-through path)
    soft: np.ndarray   # softmax(alpha) it was sampled from
    index: int         # 0-based first fusing layer

    @property
    def values(self):
        return self.s.data

    @property
    def fusion_layer(self):
        return self.index + 1


def sample_policy(alpha) -> FusionVector:
    alpha = T.as_tensor(alpha)
    if alpha.ndim != 1 or not np.all(np.isfinite(alpha.data)):
        raise ValueError("alpha must be a finite vector")
    soft = T.softmax(alpha)
    hard = T.onehot_straight_through(soft)
    s = T.matmul(policy_matrix(alpha.shape[0]), hard)
    return FusionVector(s, soft.data.copy(), argmax_tiebreak(soft.data))


def is_suffix_ones(s):
    s = np.asarray(s)
    if not np.isin(s, (0.0, 1.0)).all() or s.sum() < 1:
        return False
    return bool(np.all(np.diff(s) >= 0))


@dataclass(frozen=True)
class SearchConfig:
    inner_steps: int = 4           # K
    gamma: float = 3e-5            # inner (network) rate
    inner_optimizer: str = "adam"  # "adam" or "sgd"
    inner_weight_decay: float = 0.0
    beta: float = 3e-3             # outer (policy) Adam rate
    policy_weight_decay: float = 3e-5
    max_outer_steps: int = 300
    min_outer_steps: int = 100
    patience: int = 20
    batch_size: int = 64
    val_fraction: float = 0.15
    alpha_init_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps (K) must be >= 1")
        if self.gamma <= 0 or self.beta < 0:
            raise ValueError("gamma must be positive and beta non-negative")
        if self.inner_optimizer not in ("adam", "sgd"):
            raise ValueError("inner_optimizer must be 'adam' or 'sgd'")


@dataclass
class SearchResult:
    alpha: np.ndarray
    history: list = field(default_factory=list)
    mismatches: int = 0
    converged: bool = False

    @property
    def fusion_layer(self):
        return argmax_tiebreak(self.alpha) + 1

    @property
    def fusion(self):
        return policy_matrix(len(self.alpha))[:, argmax_tiebreak(self.alpha)].copy()


class SearchDiverged(RuntimeError):
    def __init__(self, history, cause):
        self.history = history
        super().__init__(f"policy search diverged after {len(history)} outer steps: {cause}")


def _draw(rng, data, n):
    idx = rng.choice(len(data), size=min(n, len(data)), replace=False)
    return [data[i] for i in np.sort(idx)]


def _frozen(params):
    return {k: Tensor(p.data) for k, p in params.items()}


def bilevel_search(params, cfg, enc, train_set, val_set, scfg: SearchConfig,
                   weights: TaskWeights, on_outer=None) -> SearchResult:
    """Alternate K network steps with one Adam step on ``alpha``.

    The network step is Adam (state kept across outer iterations) or plain
    SGD, both at rate ``gamma``. ``params`` are updated in place, so each
    outer iteration warm-starts from the previous inner result.
    The outer gradient treats the inner-loop result as constant in alpha.
    History rows: ``(outer_step, fusion_layer, soft policy, val_loss)``.
    """
    if not val_set:
        raise ValueError("empty validation set")
    if not train_set:
        raise ValueError("empty training set")
    rng = np.random.default_rng(scfg.seed)
    M = cfg.layers
    alpha = Tensor(rng.normal(0.0, scfg.alpha_init_std, size=M) if scfg.alpha_init_std else np.zeros(M),
                   requires_grad=True, name="alpha")
    state = AdamState(lr=scfg.beta, weight_decay=scfg.policy_weight_decay)
    inner_state = AdamState(lr=scfg.gamma, weight_decay=scfg.inner_weight_decay)
    result = SearchResult(alpha.data)
    stable = 0
    prev = None
    for outer in range(1, scfg.max_outer_steps + 1):
        tr = collate(_draw(rng, train_set, scfg.batch_size), enc)
        va = collate(_draw(rng, val_set, scfg.batch_size), enc)
        inner_idx = []
        for _ in range(scfg.inner_steps):
            pol = sample_policy(alpha.data)
            inner_idx.append(pol.index)
            with Tape() as tape:
                loss, _ = total_loss(tr, params, cfg, enc, weights, pol.values)
            grads = full_grads(params, tape.backward(loss))
            try:
                if scfg.inner_optimizer == "adam":
                    adam_step(params, grads, inner_state)
                else:
                    sgd_step(params, grads, scfg.gamma)
            except FloatingPointError as exc:
                raise SearchDiverged(result.history, exc) from exc
        frozen = _frozen(params)
        with Tape() as tape:
            pol = sample_policy(alpha)
            vloss, report = total_loss(va, frozen, cfg, enc, weights, pol.s)
        if any(i != pol.index for i in inner_idx):
            result.mismatches += 1
        if not np.isfinite(report.total):
            raise SearchDiverged(result.history, "validation loss is not finite")
        grads = tape.backward(vloss)
        g = grads.get(alpha, np.zeros(M))
        adam_step({"alpha": alpha}, {"alpha": g}, state)
        idx = argmax_tiebreak(alpha.data)
        row = (outer, idx + 1, T.softmax(alpha.data).data.copy(), report.total)
        result.history.append(row)
        if on_outer:
            on_outer(row)
        stable = stable + 1 if idx == prev else 0
        prev = idx
        if outer >= scfg.min_outer_steps and stable >= scfg.patience:
            result.converged = True
            break
    result.alpha = alpha.data.copy()
    log.info("search finished: fusion layer %d after %d outer steps", result.fusion_layer,
             len(result.history))
    return result


def retrain_fixed(policy, cfg, enc, full_train, weights: TaskWeights, tcfg: TrainConfig,
                  init_seed=0, on_step=None):
    """Fresh initialization, then multi-task training under the fixed policy."""
    s = np.asarray(policy.values if isinstance(policy, FusionVector) else policy, dtype=float)
    if not is_suffix_ones(s):
        raise ValueError(f"policy {s} is not a suffix-ones vector")
    params = init_params(cfg, enc, init_seed)
    reports = fit(params, cfg, enc, full_train, s, weights, tcfg, on_step=on_step)
    return params, reports
