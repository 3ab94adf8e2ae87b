from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrobust.data import (PRESETS, MissingnessSpec, Sample, SyntheticSpec, apply_missingness,
                           drop_modality, dump_samples, generate, load_samples, planted_signatures,
                           round_half_away)


def small(**kw):
    base = dict(n_samples=400, len1=4, len2=4, vocab1=16, vocab2=16)
    base.update(kw)
    return SyntheticSpec(**base)


def test_generate_is_deterministic():
    a, b = generate(small(seed=3)), generate(small(seed=3))
    assert [s.key() for s in a.train + a.val + a.test] == [s.key() for s in b.train + b.val + b.test]
    c = generate(small(seed=4))
    assert [s.key() for s in a.train] != [s.key() for s in c.train]


def test_splits_disjoint_and_sized():
    d = generate(small(seed=1))
    assert (len(d.train), len(d.val), len(d.test)) == (280, 60, 60)
    train_ids = {id(s) for s in d.train}
    assert not train_ids & {id(s) for s in d.val + d.test}


def test_splits_are_stratified():
    d = generate(small(seed=2, n_samples=2000))
    full = np.bincount([s.label for s in d.train + d.val + d.test], minlength=4) / 2000
    test = np.bincount([s.label for s in d.test], minlength=4) / len(d.test)
    assert np.abs(full - test).max() < 0.01


def test_spec_validation():
    for bad in (dict(dominance=1.5), dict(label_noise=1.0), dict(splits=(0.5, 0.5, 0.5)),
                dict(len1=1), dict(vocab1=8), dict(task_type="binary")):
        with pytest.raises(ValueError):
            small(**bad).validate()


def test_dominant_planting_rates():
    spec = small(seed=0, n_samples=4000, dominance=0.9)
    d = generate(spec)
    sig1, sig2 = planted_signatures(spec)
    samples = d.train + d.val + d.test
    hit1 = np.mean([set(sig1[s.label]) <= set(s.tokens1.tolist()) for s in samples])
    hit2 = np.mean([set(sig2[s.label]) <= set(s.tokens2.tolist()) for s in samples])
    assert abs(hit1 - 0.9) < 0.02
    assert abs(hit2 - 0.1) < 0.02


def _probe_accuracy(X, y, Xt, yt, steps=300, lr=0.5):
    """Logistic regression (softmax) by full-batch gradient descent."""
    C = int(y.max()) + 1
    W = np.zeros((X.shape[1], C))
    Y = np.eye(C)[y]
    for _ in range(steps):
        z = X @ W
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        W -= lr * X.T @ (p - Y) / len(X)
    return float(((Xt @ W).argmax(axis=1) == yt).mean())


def _bag(samples, which, vocab):
    X = np.zeros((len(samples), vocab + 1))
    X[:, -1] = 1.0
    for i, s in enumerate(samples):
        np.add.at(X[i], s.tokens1 if which == 1 else s.tokens2, 1.0)
    return X


@pytest.mark.parametrize("which", [1, 2])
def test_xor_single_modality_probe_at_chance(which):
    spec = SyntheticSpec(n_classes=2, task_type="binary", xor_mode=True, n_samples=10000, seed=5)
    d = generate(spec)
    tr, te = d.train + d.val, d.test
    ytr = np.array([s.label for s in tr])
    yte = np.array([s.label for s in te])
    acc = _probe_accuracy(_bag(tr, which, 32), ytr, _bag(te, which, 32), yte)
    assert abs(acc - 0.5) <= 0.03


def test_presets():
    assert PRESETS["dominant"].dominance == 0.9
    assert PRESETS["balanced-xor"].xor_mode


def test_round_half_away():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.5, -0.5, 2.4999)] == [1, 2, 3, -1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.sampled_from([0.0, 0.1, 0.25, 0.3, 0.5, 0.7, 1.0]), st.integers(0, 9),
       st.sampled_from([1, 2]))
def test_missingness_exact_count_and_idempotent(n, eta, seed, which):
    rng = np.random.default_rng(seed)
    samples = [Sample(rng.integers(0, 5, 3), rng.integers(0, 5, 2), 0) for _ in range(n)]
    m = MissingnessSpec(eta, which, seed)
    out = apply_missingness(samples, m)
    kept = sum(s.present2 if which == 2 else s.present1 for s in out)
    assert kept == round_half_away(eta * n)
    again = apply_missingness(out, m)
    assert [s.key() for s in again] == [s.key() for s in out]
    assert all(s.present1 and s.present2 for s in samples)  # input untouched


def test_drop_modality():
    s = [Sample(np.array([1]), np.array([2]), 0)] * 3
    assert not any(x.present1 for x in drop_modality(s, 1))
    with pytest.raises(ValueError):
        MissingnessSpec(1.2)


@pytest.mark.parametrize("task", ["multiclass", "binary", "multilabel"])
def test_text_format_round_trip(tmp_path, task):
    n = 2 if task == "binary" else 3
    spec = small(task_type=task, n_classes=n, len1=6, len2=6, n_samples=60, seed=1)
    d = generate(spec)
    samples = apply_missingness(d.test, MissingnessSpec(0.5, 2, 0))
    path = tmp_path / "d.tsv"
    dump_samples(samples, path, spec)
    back = load_samples(path)
    assert [s.key() for s in back] == [s.key() for s in samples]
    assert path.read_text().splitlines()[0].startswith("# mmrobust-dataset v1")
