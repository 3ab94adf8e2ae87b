"""Shared test utilities: finite-difference gradient checks, random samples."""
from __future__ import annotations

import numpy as np
from mmrobust.data import Sample
from mmrobust.encoder import EncoderConfig
from mmrobust.tensor import Tape, Tensor


def rel_error(a, b, scale=None):
    """``max|a - b| / max(max|a|, max|b|)``, or over ``scale`` when given."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if scale is None:
        scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradcheck(fn, arrays, h=1e-6):
    """Max relative error between tape gradients and central differences.

    ``fn(*tensors)`` must return a scalar Tensor. One error per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    grads = tape.backward(out)
    errors = []
    for i, a in enumerate(arrays):
        analytic = grads.get(leaves[i], np.zeros_like(a))
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = fn(*[Tensor(x) for x in arrays]).item()
            flat[j] = old - h
            down = fn(*[Tensor(x) for x in arrays]).item()
            flat[j] = old
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        errors.append(rel_error(analytic, numeric))
    return errors




def random_sample(rng, enc, label=0, present1=True, present2=True, n1=None, n2=None):
    n1 = int(rng.integers(1, enc.max_len1 + 1)) if n1 is None else n1
    n2 = int(rng.integers(1, enc.max_len2 + 1)) if n2 is None else n2
    t1 = rng.integers(0, enc.vocab1, size=n1 if present1 else 0)
    t2 = rng.integers(0, enc.vocab2, size=n2 if present2 else 0)
    return Sample(t1, t2, label, present1, present2)


# ---------------------------------------------------------------- gradient audit

def op_cases(rng):
    """``(name, fn, inputs)`` for every differentiable op of the tape.

    The straight-through one-hot is left out: its forward is piecewise
    constant, so finite differences see zero by construction. It is checked
    against the analytic softmax Jacobian instead.
    """
    from mmrobust import tensor as T

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    table = rng.normal(size=(6, 3))
    ids = np.array([[0, 5, 2], [2, 2, 1]])
    targets = (rng.random((3, 4)) < 0.5).astype(float)
    u = rng.normal(size=(3, 4))  # fixed projection making every output a scalar

    def dot(t):
        return (t * u[: t.shape[0], : t.shape[1]] if t.ndim == 2 else t).sum()

    return [
        ("add", lambda x, y: dot(x + y[0:1]), [a, b]),
        ("sub", lambda x, y: dot(x - y), [a, b]),
        ("mul", lambda x, y: dot(x * y), [a, b]),
        ("div", lambda x, y: dot(x / y), [a, pos]),
        ("neg", lambda x: dot(-x), [a]),
        ("exp", lambda x: dot(T.exp(x)), [a]),
        ("log", lambda x: dot(T.log(x)), [pos]),
        ("sigmoid", lambda x: dot(T.sigmoid(x)), [a]),
        ("gelu", lambda x: dot(T.gelu(x)), [a]),
        ("matmul", lambda x, y: T.matmul(x, y).mean() + (T.matmul(x, y) * T.matmul(x, y)).sum(), [a, w]),
        ("matmul_batched", lambda x, y: (T.matmul(x, y) * T.matmul(x, y)).sum(),
         [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
        ("sum", lambda x: (T.tsum(x, axis=1) * np.arange(3)).sum(), [a]),
        ("mean", lambda x: (T.mean(x, axis=0, keepdims=True) * u[:1]).sum() + T.mean(x), [a]),
        ("reshape", lambda x: dot(T.reshape(x, (4, 3)).reshape(3, 4)) + (T.reshape(x, (12,)) * np.arange(12)).sum(), [a]),
        ("transpose", lambda x: (T.transpose(x, (1, 0)) * u.T).sum(), [a]),
        ("index", lambda x: (x[1:, ::2] * u[1:, ::2]).sum() + x[np.array([0, 0, 2]), 1].sum(), [a]),
        ("concat", lambda x, y: (T.concat([x, y], axis=1) * np.arange(8)).sum(), [a, b]),
        ("embedding", lambda t: (T.embedding(t, ids) * rng_fixed(ids.shape + (3,))).sum(), [table]),
        ("masked_softmax", lambda x: dot(T.masked_softmax(x, mask)), [a]),
        ("softmax", lambda x: dot(T.softmax(x)), [a]),
        ("log_softmax", lambda x: dot(T.log_softmax(x)), [a]),
        ("layer_norm", lambda x, g, bb: dot(T.layer_norm(x, g, bb)),
         [a, rng.normal(size=4), rng.normal(size=4)]),
        ("bce_with_logits", lambda x: dot(T.bce_with_logits(x, targets)), [a]),
    ]


def rng_fixed(shape):
    return np.random.default_rng(99).normal(size=shape)


def audit_ops(rng):
    """``{op: max relative error}`` over the ops' inputs."""
    return {name: max(gradcheck(fn, arrays)) for name, fn, arrays in op_cases(rng)}


def tiny_model(seed=0, task_type="multiclass"):
    from mmrobust.model import ModelConfig, init_params

    enc = EncoderConfig(d_model=8, vocab1=7, vocab2=5, max_len1=4, max_len2=3)
    n = 1 if task_type == "binary" else 3
    cfg = ModelConfig(layers=2, heads=2, d_model=8, d_ff=16, n_classes=n, task_type=task_type)
    return cfg, enc, init_params(cfg, enc, seed)


def model_gradcheck(seed=0, h=1e-6):
    """Per-tensor relative error of d total_loss / d params, M=2, d_model=8.

    Errors are normalised by the largest analytic gradient entry of the whole
    model, so tensors whose gradient is exactly zero by symmetry (attention
    key biases) are not judged on rounding noise alone. The batch mixes complete samples with ones missing either modality, so
    every head and both mask kinds are exercised.
    """
    from mmrobust.encoder import collate
    from mmrobust.multitask import TaskWeights, total_loss
    from mmrobust.training import full_grads

    rng = np.random.default_rng(seed)
    cfg, enc, params = tiny_model(seed)
    samples = [random_sample(rng, enc, label=int(rng.integers(0, 3))) for _ in range(3)]
    samples += [random_sample(rng, enc, 1, present2=False), random_sample(rng, enc, 2, present1=False)]
    batch = collate(samples, enc)
    fusion = np.array([0.0, 1.0])
    weights = TaskWeights(1.0, 0.7, 1.3)

    with Tape() as tape:
        loss, _ = total_loss(batch, params, cfg, enc, weights, fusion)
    grads = full_grads(params, tape.backward(loss))

    def value():
        return total_loss(batch, params, cfg, enc, weights, fusion)[1].total

    scale = max(np.abs(g).max() for g in grads.values())
    worst = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = value()
            flat[j] = old - h
            down = value()
            flat[j] = old
            numeric[j] = (up - down) / (2 * h)
        worst[name] = rel_error(grads[name].reshape(-1), numeric, scale)
    return worst


# ---------------------------------------------------------------- isolation

def isolation_trial(rng, cfg, enc, params, fusion):
    """Perturb the other modality and compare single-modality logits bit for bit.

    Returns (m1_identical, m2_identical) for one random sample.
    """
    from mmrobust.model import model_forward

    base = random_sample(rng, enc)
    alt2 = random_sample(rng, enc, n1=len(base.tokens1))
    alt1 = random_sample(rng, enc, n2=len(base.tokens2))
    pert2 = Sample(base.tokens1, alt2.tokens2, 0)
    pert1 = Sample(alt1.tokens1, base.tokens2, 0)
    _, m1, m2 = model_forward(base, fusion, params, cfg, enc)
    _, m1p, _ = model_forward(pert2, fusion, params, cfg, enc)
    _, _, m2p = model_forward(pert1, fusion, params, cfg, enc)
    return (np.array_equal(m1.data, m1p.data), np.array_equal(m2.data, m2p.data))


# ---------------------------------------------------------------- metric oracles

def brute_f1(pred, true):
    """F1 suite from explicit per-cell confusion counting (Python loops)."""
    from fractions import Fraction

    N, C = len(pred), len(pred[0])

    def f1(tp, fp, fn):
        den = 2 * tp + fp + fn
        return Fraction(0) if den == 0 else Fraction(2 * tp, den)

    counts = []
    for c in range(C):
        tp = fp = fn = 0
        for i in range(N):
            p, t = bool(pred[i][c]), bool(true[i][c])
            tp += p and t
            fp += p and not t
            fn += (not p) and t
        counts.append((tp, fp, fn))
    per = [f1(*k) for k in counts]
    support = [sum(bool(true[i][c]) for i in range(N)) for c in range(C)]
    micro = f1(sum(k[0] for k in counts), sum(k[1] for k in counts), sum(k[2] for k in counts))
    weighted = (sum(f * s for f, s in zip(per, support)) / sum(support)) if sum(support) else Fraction(0)
    samples = []
    for i in range(N):
        tp = sum(bool(pred[i][c]) and bool(true[i][c]) for c in range(C))
        den = sum(bool(pred[i][c]) for c in range(C)) + sum(bool(true[i][c]) for c in range(C))
        samples.append(Fraction(0) if den == 0 else Fraction(2 * tp, den))
    return {"f1_micro": micro, "f1_macro": sum(per) / C, "f1_weighted": weighted,
            "f1_samples": sum(samples) / N}


def brute_auroc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), over all positive/negative pairs."""
    from fractions import Fraction

    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0
    for p in pos:
        for n in neg:
            wins += 2 if p > n else (1 if p == n else 0)
    return Fraction(wins, 2 * len(pos) * len(neg))


def random_f1_instance(rng):
    N, C = int(rng.integers(1, 9)), int(rng.integers(1, 5))
    density = rng.uniform(0.0, 1.0)
    return rng.random((N, C)) < density, rng.random((N, C)) < rng.uniform(0.0, 1.0)


def random_auroc_instance(rng):
    n = int(rng.integers(2, 16))
    labels = rng.random(n) < 0.5
    labels[0], labels[1] = True, False
    scores = rng.integers(0, 5, size=n).astype(float) / 4.0  # coarse grid forces ties
    return scores, labels


def metric_oracle_mismatches(seed=0, n=1000):
    """Count instances where the library differs from brute force (exact, float vs Fraction)."""
    from mmrobust.metrics import auroc, f1_suite

    rng = np.random.default_rng(seed)
    f1_bad = 0
    for _ in range(n):
        p, t = random_f1_instance(rng)
        got, want = f1_suite(p, t), brute_f1(p.tolist(), t.tolist())
        f1_bad += any(got[k] != float(want[k]) for k in want)
    au_bad = 0
    for _ in range(n):
        s, y = random_auroc_instance(rng)
        au_bad += auroc(s, y) != float(brute_auroc(s.tolist(), y.tolist()))
    return f1_bad, au_bad


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: list = []


def report(number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok
