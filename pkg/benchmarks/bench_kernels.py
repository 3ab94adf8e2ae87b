"""Compiled vs pure-Python kernel backends.

Times each row kernel on attention-/activation-shaped inputs, checks the two
backends agree, and times one end-to-end training run under each backend
(``MMROBUST_KERNELS`` selects the backend of a fresh interpreter).

    python3 benchmarks/bench_kernels.py [--repeat 200] [--rows 64 256] [--no-train]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mmrobust import _kernels_py as py_impl

try:
    from mmrobust import _ckernels as c_impl
except ImportError:  # extension not built
    c_impl = None

TRAIN_SNIPPET = """
import time
from dataclasses import replace
from mmrobust import config as C
from mmrobust.experiment import train_run
from mmrobust.kernels import BACKEND
cfg = C.load_preset("tiny")
cfg = replace(cfg, training_section=replace(cfg.training_section, epochs=3))
t0 = time.perf_counter()
train_run(cfg)
print(BACKEND, time.perf_counter() - t0)
"""


def kernel_cases(rng, rows, n):
    x = rng.normal(size=(rows, n))
    mask = (rng.random((rows, n)) < 0.7).astype(np.uint8)
    mask[:, 0] = 1
    p, _ = py_impl.masked_softmax_fwd(x, mask)
    gain, bias = rng.normal(size=n), rng.normal(size=n)
    _, xhat, rstd = py_impl.layernorm_fwd(x, gain, bias, 1e-5)
    g = rng.normal(size=(rows, n))
    return {
        "masked_softmax_fwd": lambda m: m.masked_softmax_fwd(x, mask),
        "masked_softmax_bwd": lambda m: m.masked_softmax_bwd(p, g),
        "layernorm_fwd": lambda m: m.layernorm_fwd(x, gain, bias, 1e-5),
        "layernorm_bwd": lambda m: m.layernorm_bwd(g, xhat, rstd, gain),
        "gelu_fwd": lambda m: m.gelu_fwd(x),
        "gelu_bwd": lambda m: m.gelu_bwd(x, g),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(u, v) for u, v in zip(a, b))
    if a is None or isinstance(a, int):
        return 0.0 if a == b else float("inf")
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())


def bench_kernels(rows_list, n, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'rows':>5} {'python us':>10} {'cython us':>10} {'speedup':>8} {'max|diff|':>10}")
    for rows in rows_list:
        for name, call in kernel_cases(rng, rows, n).items():
            t_py = min(timeit.repeat(lambda: call(py_impl), number=repeat, repeat=3)) / repeat * 1e6
            if c_impl is None:
                print(f"{name:<20} {rows:>5} {t_py:>10.1f} {'n/a':>10}")
                continue
            t_c = min(timeit.repeat(lambda: call(c_impl), number=repeat, repeat=3)) / repeat * 1e6
            diff = max_diff(call(py_impl), call(c_impl))
            print(f"{name:<20} {rows:>5} {t_py:>10.1f} {t_c:>10.1f} {t_py / t_c:>7.2f}x {diff:>10.1e}")


def bench_training():
    print("\nend-to-end: tiny preset, 3 epochs")
    for backend in ("python", "cython"):
        env = {**os.environ, "MMROBUST_KERNELS": backend}
        proc = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env,
                              capture_output=True, text=True)
        if proc.returncode != 0:
            print(f"  {backend}: failed ({proc.stderr.strip().splitlines()[-1]})")
            continue
        used, secs = proc.stdout.split()
        print(f"  requested {backend:<7} used {used:<7} {float(secs):6.2f} s")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--rows", type=int, nargs="+", default=[64, 1024])
    p.add_argument("--width", type=int, default=16, help="row length (sequence length / features)")
    p.add_argument("--no-train", action="store_true")
    args = p.parse_args(argv)
    bench_kernels(args.rows, args.width, args.repeat)
    if not args.no_train:
        bench_training()


if __name__ == "__main__":
    main()
