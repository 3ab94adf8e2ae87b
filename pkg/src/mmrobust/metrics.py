"""Classification metrics and the full-vs-missing evaluation protocol."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .data import MissingnessSpec, apply_missingness

DEFAULT_ETAS = (1.0, 0.7, 0.5, 0.3, 0.1, 0.0)
PRIMARY_METRIC = {"multilabel": "f1_macro", "multiclass": "accuracy", "binary": "auroc"}
_F1 = ("f1_micro", "f1_macro", "f1_weighted", "f1_samples")
METRIC_NAMES = {"multilabel": _F1 + ("accuracy",), "multiclass": ("accuracy",) + _F1,
                "binary": ("accuracy", "auroc")}


def _ratio(num, den):
    return Fraction(int(num), int(den)) if den else Fraction(0)


def f1_suite(pred_bits, true_bits):
    """F1 micro / macro / weighted / samples for ``N x C`` 0/1 matrices.

    Any F1 whose denominator ``2TP + FP + FN`` is zero counts as 0. Every
    variant is a ratio of integer counts, so averages are taken in exact
    rational arithmetic and rounded to float once.
    """
    pred = np.asarray(pred_bits).astype(bool)
    true = np.asarray(true_bits).astype(bool)
    if pred.shape != true.shape or pred.ndim != 2 or pred.shape[1] < 1:
        raise ValueError(f"f1_suite: shape mismatch {pred.shape} vs {true.shape}")
    tp = (pred & true).sum(axis=0)
    fp = (pred & ~true).sum(axis=0)
    fn = (~pred & true).sum(axis=0)
    per_class = [_ratio(2 * a, 2 * a + b + c) for a, b, c in zip(tp, fp, fn)]
    support = true.sum(axis=0)
    micro = _ratio(2 * tp.sum(), 2 * tp.sum() + fp.sum() + fn.sum())
    total_support = int(support.sum())
    weighted = (sum(f * int(n) for f, n in zip(per_class, support)) / total_support
                if total_support else Fraction(0))
    tp_r = (pred & true).sum(axis=1)
    den_r = pred.sum(axis=1) + true.sum(axis=1)
    samples = sum((_ratio(2 * a, d) for a, d in zip(tp_r, den_r)), Fraction(0)) / len(pred)
    return {"f1_micro": float(micro), "f1_macro": float(sum(per_class) / len(per_class)),
            "f1_weighted": float(weighted), "f1_samples": float(samples)}


def auroc(scores, labels):
    """Mann-Whitney AUROC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("auroc: scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(pred, true):
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"accuracy: shape mismatch {pred.shape} vs {true.shape}")
    if pred.ndim == 2:
        return float((pred == true).all(axis=1).mean())
    return float((pred == true).mean())


def degradation_delta(full_score, missing_score):
    """Relative drop in percent, rounded to one decimal."""
    if full_score <= 0:
        raise ValueError("full_score must be positive")
    return round((full_score - missing_score) / full_score * 100.0, 1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def score_logits(logits, labels, task_type, threshold=0.5):
    """Task-appropriate metrics from chosen-head logits ``[N, C]``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if task_type == "multiclass":
        pred = logits.argmax(axis=1)
        C = logits.shape[1]
        out = {"accuracy": accuracy(pred, labels)}
        out.update(f1_suite(np.eye(C, dtype=bool)[pred], np.eye(C, dtype=bool)[labels]))
        return out
    if task_type == "binary":
        score = logits[:, 0]
        out = {"accuracy": accuracy((_sigmoid(score) >= threshold).astype(int), labels)}
        out["auroc"] = auroc(score, labels) if 0 < labels.sum() < len(labels) else float("nan")
        return out
    pred = _sigmoid(logits) >= threshold
    out = f1_suite(pred, labels)
    out["accuracy"] = accuracy(pred.astype(int), labels)
    return out


@dataclass
class EvalReport:
    eta: float
    metrics: dict
    n_samples: int
    seed: int = 0
    policy: str = ""
    delta: dict = field(default_factory=dict)
    heads: dict = field(default_factory=dict)


def evaluate(model, test_set, etas=DEFAULT_ETAS, target_modality=2, seed=0, threshold=0.5):
    """One report per eta: corrupt ``test_set``, predict with the model's head
    rule, score, and attach Delta against the eta = 1 report (computed first
    if the grid lacks it)."""
    from .model import policy_string

    task = model.cfg.task_type
    labels = np.asarray([s.label for s in test_set])

    def run(eta):
        corrupted = apply_missingness(test_set, MissingnessSpec(eta, target_modality, seed))
        logits, chosen = model.logits(corrupted)
        heads = {h: chosen.count(h) for h in ("joint", "m1", "m2") if h in chosen}
        return EvalReport(float(eta), score_logits(logits, labels, task, threshold),
                          len(test_set), seed, policy_string(model.fusion), heads=heads)

    reports = [run(eta) for eta in etas]
    full = next((r for r in reports if r.eta == 1.0), None) or run(1.0)
    for r in reports:
        r.delta = {k: degradation_delta(full.metrics[k], v)
                   for k, v in r.metrics.items()
                   if np.isfinite(v) and np.isfinite(full.metrics[k]) and full.metrics[k] > 0}
    return reports
