"""Run orchestration: train / evaluate / sweep, and the files each run leaves behind.

A run directory holds::

    config.ini          resolved configuration (seed included)
    seed.txt            the run seed
    checkpoint.ckpt     final model (or the last good one after divergence)
    train_log.csv       step, loss_m1, loss_m2, loss_joint, total
    search_history.csv  outer_step, argmax, s_1..s_M, val_loss (search mode only)
    results.csv         schema, dataset, seed, policy, eta, metric, value, delta
                        (one row per eta and reported metric)
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import RESULTS_SCHEMA
from . import config as C
from .data import generate
from .errors import ConfigError
from .metrics import PRIMARY_METRIC, evaluate
from .model import Model, fusion_from_layer, init_params, load_checkpoint, policy_string, save_checkpoint
from .multitask import BASELINE_WEIGHTS
from .search import SearchDiverged, bilevel_search
from .training import TrainingDiverged, fit

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["schema", "dataset", "seed", "policy", "eta", "metric", "value", "delta"]
LOG_COLUMNS = ["step", "loss_m1", "loss_m2", "loss_joint", "total"]


class RunFailed(RuntimeError):
    """Training or search stopped early; the last good checkpoint was written."""


def _num(v):
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclass
class RunResult:
    model: Model
    log_rows: list = field(default_factory=list)
    history: list = field(default_factory=list)
    out_dir: Path | None = None


def build_model(cfg: C.ExperimentConfig, params, fusion, **extra):
    head_rule = "joint" if cfg.mode == "baseline" else "availability"
    fusion = np.asarray(fusion, dtype=np.float64)
    meta = {"config": C.dumps(cfg), "seed": cfg.seed, "mode": cfg.mode,
            "fusion_layer": int(np.flatnonzero(fusion >= 0.5)[0]) + 1, **extra}
    return Model(cfg.model, cfg.encoder, params, fusion, head_rule, meta)


def train_run(cfg: C.ExperimentConfig, out_dir=None) -> RunResult:
    """Train per ``cfg.mode``; write run artifacts when ``out_dir`` is given."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(C.dumps(cfg))
        (out / "seed.txt").write_text(f"{cfg.seed}\n")
    data = generate(cfg.synthetic_spec())
    mcfg, enc = cfg.model, cfg.encoder
    weights = BASELINE_WEIGHTS if cfg.mode == "baseline" else cfg.weights
    log_rows, history = [], []

    def on_step(step, report):
        log_rows.append([step, *report.row()])

    fusion = fusion_from_layer(cfg.training_section.fusion_layer, mcfg.layers)
    state = {"params": None}
    search_meta = {}

    def snapshot(good):
        if out is not None and state["params"] is not None:
            params = state["params"]
            for k, v in good.items():
                params[k].data = v
            save_checkpoint(out / "checkpoint.ckpt",
                            build_model(cfg, params, fusion, **search_meta), {"diverged": True})

    try:
        if cfg.mode == "multitask_search":
            params = init_params(mcfg, enc, cfg.seed)
            result = bilevel_search(params, mcfg, enc, data.train, data.val, cfg.search, weights,
                                    on_outer=history.append)
            fusion = result.fusion
            search_meta.update(alpha=[float(a) for a in result.alpha],
                               search_steps=len(result.history), search_converged=result.converged)
            log.info("searched fusion layer %d", result.fusion_layer)
            state["params"] = params = init_params(mcfg, enc, cfg.seed)
            fit(params, mcfg, enc, data.train + data.val, fusion, weights, cfg.training,
                on_step=on_step, snapshot=snapshot)
        else:
            state["params"] = params = init_params(mcfg, enc, cfg.seed)
            fit(params, mcfg, enc, data.train, fusion, weights, cfg.training,
                on_step=on_step, snapshot=snapshot)
    except (TrainingDiverged, SearchDiverged) as exc:
        if out is not None:
            _write_logs(out, log_rows, history, mcfg.layers)
        raise RunFailed(str(exc)) from exc
    model = build_model(cfg, params, fusion, **search_meta)
    if out is not None:
        _write_logs(out, log_rows, history, mcfg.layers)
        save_checkpoint(out / "checkpoint.ckpt", model)
    return RunResult(model, log_rows, history, out)


def _write_logs(out, log_rows, history, layers):
    _write_csv(out / "train_log.csv", LOG_COLUMNS,
               [[r[0], *(_num(v) for v in r[1:])] for r in log_rows])
    if history:
        _write_csv(out / "search_history.csv",
                   ["outer_step", "argmax", *(f"s_{i + 1}" for i in range(layers)), "val_loss"],
                   [[o, a, *(_num(v) for v in soft), _num(v)] for o, a, soft, v in history])


def config_from_checkpoint(model: Model) -> C.ExperimentConfig:
    text = model.meta.get("config")
    if not text:
        raise ConfigError("checkpoint", "checkpoint carries no embedded configuration")
    return C.loads(text)


def check_compatible(cfg: C.ExperimentConfig, model: Model):
    if cfg.model != model.cfg:
        raise ConfigError("model", f"config {cfg.model} does not match checkpoint {model.cfg}")
    if cfg.encoder != model.enc:
        raise ConfigError("data", f"config encoder {cfg.encoder} does not match checkpoint {model.enc}")


def eval_model(model: Model, cfg: C.ExperimentConfig, etas=None):
    """Evaluate on the test split regenerated from ``cfg``; returns (reports, rows)."""
    check_compatible(cfg, model)
    data = generate(cfg.synthetic_spec())
    etas = tuple(etas) if etas is not None else cfg.eval.etas
    reports = evaluate(model, data.test, etas, cfg.eval.target_modality, cfg.seed, cfg.eval.threshold)
    return reports, result_rows(cfg, model, reports)


def result_rows(cfg, model, reports):
    rows = []
    for r in reports:
        for metric in cfg.result_metrics():
            d = r.delta.get(metric)
            rows.append([RESULTS_SCHEMA, cfg.name, cfg.seed, policy_string(model.fusion),
                         f"{r.eta:g}", metric, _num(r.metrics[metric]),
                         "" if d is None else f"{d:.1f}"])
    return rows


def write_results(path, rows):
    _write_csv(path, RESULT_COLUMNS, rows)


def format_table(cfg, reports):
    """Short text table: eta, primary metric, Delta."""
    metric = PRIMARY_METRIC[cfg.data.task_type]
    lines = [f"{'eta':>5}  {metric:>10}  {'delta%':>7}"]
    for r in reports:
        d = r.delta.get(metric)
        lines.append(f"{r.eta:>5g}  {r.metrics[metric]:>10.4f}  {'' if d is None else f'{d:.1f}':>7}")
    return "\n".join(lines)


def run_one(cfg: C.ExperimentConfig, out_dir, etas=None):
    res = train_run(cfg, out_dir)
    reports, rows = eval_model(res.model, cfg, etas)
    if out_dir is not None:
        write_results(Path(out_dir) / "results.csv", rows)
    return reports, rows


def _sweep_job(args):
    text, seed, out_dir, etas = args
    cfg = C.loads(text).with_seed(seed)
    _, rows = run_one(cfg, out_dir, etas)
    return rows


def sweep(cfg: C.ExperimentConfig, seeds, out_dir, etas=None, jobs=1):
    """Train + evaluate one run per seed; write per-seed rows and a summary.

    ``sweep_results.csv`` is the long (plot-ready) concatenation of every
    run's results; ``sweep_summary.csv`` gives mean/min/max across seeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = C.dumps(cfg)
    jobs_args = [(text, s, str(out / f"seed{s}"), etas) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_sweep_job, jobs_args))
    else:
        per_seed = [_sweep_job(a) for a in jobs_args]
    rows = [r for chunk in per_seed for r in chunk]
    write_results(out / "sweep_results.csv", rows)
    summary = summarize(rows, cfg)
    _write_csv(out / "sweep_summary.csv",
               ["schema", "dataset", "mode", "eta", "metric", "n_seeds", "mean", "min", "max"], summary)
    return rows, summary


def summarize(rows, cfg):
    groups = {}
    for r in rows:
        if r[6] == "nan":
            continue
        groups.setdefault((r[4], r[5]), []).append(float(r[6]))
    out = []
    for (eta, metric), vals in sorted(groups.items(), key=lambda kv: (-float(kv[0][0]), kv[0][1])):
        out.append([RESULTS_SCHEMA, cfg.name, cfg.mode, eta, metric, len(vals),
                    _num(float(np.mean(vals))), _num(min(vals)), _num(max(vals))])
    return out


def load_for_eval(checkpoint, config_path=None):
    try:
        model = load_checkpoint(checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError("checkpoint", f"cannot load {checkpoint}: {exc}") from None
    cfg = C.load(config_path) if config_path else config_from_checkpoint(model)
    check_compatible(cfg, model)
    return model, cfg
