"""Acceptance gate: one test per primary criterion, each printing a PASS/FAIL line.

Runs standalone too: ``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import replace

import numpy as np

from helpers import (audit_ops, isolation_trial, metric_oracle_mismatches, model_gradcheck,
                     random_sample, report)
from mmrobust import config as C
from mmrobust import tensor as T
from mmrobust.cli import main
from mmrobust.data import Sample, drop_modality, generate
from mmrobust.encoder import CLS_M1, CLS_M2, EncoderConfig, SequenceLayout
from mmrobust.experiment import build_model, train_run
from mmrobust.masking import compose, layer_mask, reachable_from
from mmrobust.metrics import degradation_delta, evaluate
from mmrobust.model import ModelConfig, init_params, model_forward
from mmrobust.multitask import TaskWeights
from mmrobust.search import bilevel_search, is_suffix_ones, policy_matrix, sample_policy
from mmrobust.tensor import Tape, Tensor
from mmrobust.training import fit

DELTA_PAIRS = [((55.3, 31.2), 43.6), ((91.9, 65.9), 28.3), ((70.2, 56.3), 19.8),
               ((70.2, 60.2), 14.2), ((55.3, 35.0), 36.7), ((91.9, 71.5), 22.2)]


def test_1_delta_arithmetic():
    got = [degradation_delta(*pair) for pair, _ in DELTA_PAIRS]
    want = [d for _, d in DELTA_PAIRS]
    ok = got == want
    report(1, ok, f"delta pairs {got} vs {want}")
    assert ok


def test_2_gradient_audit():
    t0 = time.time()
    op_err = {}
    for seed in range(3):
        for k, v in audit_ops(np.random.default_rng(seed)).items():
            op_err[k] = max(op_err.get(k, 0.0), v)
    model_err = max(model_gradcheck(0).values())
    worst_op = max(op_err, key=op_err.get)
    ok = max(op_err.values()) < 1e-4 and model_err < 1e-4
    report(2, ok, f"{len(op_err)} ops, worst {worst_op} {op_err[worst_op]:.1e}; "
                  f"tiny model (M=2, d=8) {model_err:.1e}; tol 1e-4; {time.time() - t0:.0f}s")
    assert ok


def _static_isolation(max1, max2, M):
    """Every layout and every policy: cls_mk's reachable set in its stream
    excludes the other modality (exact and padded layouts)."""
    checked = 0
    for n1, n2 in itertools.product(range(max1 + 1), range(max2 + 1)):
        if n1 + n2 == 0:
            continue
        layouts = [SequenceLayout.exact(n1, n2, n1 > 0, n2 > 0),
                   SequenceLayout.padded(n1, n2, n1 > 0, n2 > 0, max1, max2)]
        for lay in layouts:
            kinds = [lay.classify(i) for i in range(lay.length)]
            other_of = {CLS_M1: {"m2", "cls_m2"}, CLS_M2: {"m1", "cls_m1"}}
            single = [layer_mask(lay, False)] * M
            for cls, other in other_of.items():
                reach = reachable_from(single, cls)
                if any(reach[i] for i, k in enumerate(kinds) if k in other):
                    return False, checked
            for j in range(M):
                s = policy_matrix(M)[:, j]
                for l in range(M):
                    m = compose(l, s, lay)
                    for cls, other in other_of.items():
                        if any(m[cls, i] for i, k in enumerate(kinds) if k in other):
                            return False, checked
            checked += 1
    return True, checked


def test_3_mask_isolation():
    rng = np.random.default_rng(0)
    enc = EncoderConfig(d_model=16, vocab1=11, vocab2=9, max_len1=5, max_len2=4)
    cfg = ModelConfig(layers=4, heads=2, d_model=16, d_ff=32, n_classes=3)
    params = init_params(cfg, enc, 0)
    failures = 0
    trials = 0
    for j in range(cfg.layers):
        fusion = policy_matrix(cfg.layers)[:, j]
        for _ in range(100):
            m1_same, m2_same = isolation_trial(rng, cfg, enc, params, fusion)
            failures += (not m1_same) + (not m2_same)
            trials += 2
        # removing the other modality entirely is also a perturbation
        for _ in range(10):
            s = random_sample(rng, enc)
            _, m1, m2 = model_forward(s, fusion, params, cfg, enc)
            _, m1x, _ = model_forward(Sample(s.tokens1, s.tokens2[:0], 0, True, False),
                                      fusion, params, cfg, enc)
            _, _, m2x = model_forward(Sample(s.tokens1[:0], s.tokens2, 0, False, True),
                                      fusion, params, cfg, enc)
            failures += (not np.array_equal(m1.data, m1x.data)) + (not np.array_equal(m2.data, m2x.data))
            trials += 2
    static_ok, layouts = _static_isolation(enc.max_len1, enc.max_len2, cfg.layers)
    ok = failures == 0 and static_ok
    report(3, ok, f"{trials} bitwise comparisons over {cfg.layers} policies, {failures} differ; "
                  f"static reachability over {layouts} layouts x {cfg.layers} policies: "
                  f"{'holds' if static_ok else 'VIOLATED'}")
    assert ok


def test_4_straight_through():
    rng = np.random.default_rng(0)
    onehot_ok = True
    worst = 0.0
    for _ in range(200):
        M = int(rng.integers(1, 9))
        alpha = Tensor(rng.normal(0, 2, size=M), requires_grad=True)
        c = rng.normal(size=M)
        with Tape() as tape:
            soft = T.softmax(alpha)
            hard = T.onehot_straight_through(soft)
            loss = (T.matmul(policy_matrix(M), hard) * c).sum()
        h = hard.data
        onehot_ok &= bool(np.isin(h, (0.0, 1.0)).all() and h.sum() == 1.0
                          and h[int(np.argmax(soft.data))] == 1.0)
        g = tape.backward(loss)[alpha]
        p = soft.data
        u = policy_matrix(M).T @ c
        jvp = p * (u - p @ u)  # analytic softmax Jacobian-vector product
        worst = max(worst, float(np.abs(g - jvp).max()))
    spaces_ok = True
    for M in range(1, 9):
        got = {tuple(sample_policy(10.0 * np.eye(M)[j]).values) for j in range(M)}
        want = {tuple(v) for v in itertools.product((0.0, 1.0), repeat=M) if is_suffix_ones(v)}
        spaces_ok &= got == want and len(got) == M
    ok = onehot_ok and worst < 1e-10 and spaces_ok
    report(4, ok, f"forward one-hot exact: {onehot_ok}; max |ST grad - softmax JVP| {worst:.1e} "
                  f"(tol 1e-10); one-hot enumeration = suffix-ones for M=1..8: {spaces_ok}")
    assert ok


def _accuracy_at(model, cfg, test, etas, seed):
    reps = evaluate(model, test, etas, cfg.eval.target_modality, seed)
    return [r.metrics["accuracy"] for r in reps]


def test_5_multitask_robustness():
    t0 = time.time()
    base = C.load_preset("dominant")
    target = base.eval.target_modality
    keep = 3 - target
    wins, mt0, floors, lines = 0, [], [], []
    for seed in range(5):
        cfg = base.with_seed(seed)
        data = generate(cfg.synthetic_spec())
        mt = train_run(replace(cfg, mode="multitask")).model
        bl = train_run(replace(cfg, mode="baseline")).model
        mt_acc = _accuracy_at(mt, cfg, data.test, (0.1, 0.0), seed)
        bl_acc = _accuracy_at(bl, cfg, data.test, (0.1, 0.0), seed)
        # unimodal floor: a model that only ever saw the kept modality
        params = init_params(cfg.model, cfg.encoder, seed)
        w = TaskWeights(1.0, 0.0, 0.0) if keep == 1 else TaskWeights(0.0, 1.0, 0.0)
        fit(params, cfg.model, cfg.encoder, drop_modality(data.train, target), mt.fusion, w, cfg.training)
        floor = _accuracy_at(build_model(cfg, params, mt.fusion), cfg, data.test, (0.0,), seed)[0]
        wins += mt_acc[0] > bl_acc[0]
        mt0.append(mt_acc[1])
        floors.append(floor)
        lines.append(f"seed {seed}: eta=0.1 mt {mt_acc[0]:.3f} vs base {bl_acc[0]:.3f}; "
                     f"eta=0 mt {mt_acc[1]:.3f} floor {floor:.3f}")
    for line in lines:
        print("  " + line)
    elapsed = time.time() - t0
    floor_ok = np.mean(mt0) >= np.mean(floors) - 0.02
    ok = wins >= 4 and floor_ok and elapsed < 15 * 60
    report(5, ok, f"multitask > baseline at eta=0.1 in {wins}/5 seeds; eta=0 mean {np.mean(mt0):.3f} "
                  f"vs unimodal floor {np.mean(floors):.3f} (-0.02 allowed); {elapsed / 60:.1f} min")
    assert ok


def _search_layers(preset):
    base = C.load_preset(preset)
    landed = []
    for seed in range(5):
        cfg = base.with_seed(seed)
        data = generate(cfg.synthetic_spec())
        params = init_params(cfg.model, cfg.encoder, seed)
        r = bilevel_search(params, cfg.model, cfg.encoder, data.train, data.val, cfg.search, cfg.weights)
        landed.append(r.fusion_layer)
    return landed, base.model_section.layers


def test_6_search_sanity():
    t0 = time.time()
    xor, M = _search_layers("balanced-xor")
    dom, _ = _search_layers("dominant")
    early = sum(v <= M // 2 for v in xor)
    elapsed = time.time() - t0
    ok = early >= 4 and elapsed < 30 * 60
    trend = ("later" if np.mean(dom) > np.mean(xor) else
             "tie" if np.mean(dom) == np.mean(xor) else "earlier")
    report(6, ok, f"balanced-xor fusion layers {xor} -> {early}/5 in first half (M={M}); "
                  f"dominant {dom} (mean {np.mean(dom):.1f} vs {np.mean(xor):.1f}: {trend}, reported only); "
                  f"{elapsed / 60:.1f} min")
    assert ok


def test_7_metric_oracles():
    f1_bad, au_bad = metric_oracle_mismatches(seed=0, n=1000)
    ok = f1_bad == 0 and au_bad == 0
    report(7, ok, f"f1_suite mismatches {f1_bad}/1000, AUROC mismatches {au_bad}/1000 (exact equality)")
    assert ok


def test_8_determinism(tmp_path):
    search_cfg = tmp_path / "search.ini"
    search_cfg.write_text(C.dumps(replace(C.load_preset("tiny"), mode="multitask_search")))
    commands = {
        "train": lambda out: ["train", "--config", "preset:tiny", "--seed", "2", "--out-dir", out],
        "train-search": lambda out: ["train", "--config", str(search_cfg), "--out-dir", out],
        "sweep": lambda out: ["sweep", "--config", "preset:tiny", "--seeds", "0", "1", "--out-dir", out],
    }
    same = {}
    for name, argv in commands.items():
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            assert main(argv(str(out))) == 0
            outs.append(out)
        csv_name = "sweep_results.csv" if name == "sweep" else "results.csv"
        same[name] = (outs[0] / csv_name).read_bytes() == (outs[1] / csv_name).read_bytes()
    ckpt = tmp_path / "train-a" / "checkpoint.ckpt"
    for rep in ("a", "b"):
        assert main(["eval", "--checkpoint", str(ckpt), "--out-dir", str(tmp_path / f"eval-{rep}")]) == 0
    same["eval"] = ((tmp_path / "eval-a" / "results.csv").read_bytes()
                    == (tmp_path / "eval-b" / "results.csv").read_bytes())
    ok = all(same.values())
    report(8, ok, "byte-identical results CSV on re-run: "
                  + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items()))
    assert ok


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    failed = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
