"""Command line: ``mmrobust {train,eval,sweep,search-history}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from . import experiment as X
from .errors import ConfigError

log = logging.getLogger("mmrobust")


def _load_config(args):
    if args.config is None:
        raise ConfigError("config", "--config is required (an INI path or preset:NAME)")
    if args.config.startswith("preset:"):
        cfg = C.load_preset(args.config.split(":", 1)[1])
    else:
        cfg = C.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _etas(args):
    if not args.eta:
        return None
    for e in args.eta:
        if not 0.0 <= e <= 1.0:
            raise ConfigError("--eta", f"{e} not in [0, 1]")
    return tuple(args.eta)


def cmd_train(args):
    cfg = _load_config(args)
    out = Path(args.out_dir or f"runs/{cfg.name}-seed{cfg.seed}")
    reports, _ = X.run_one(cfg, out, _etas(args))
    print(X.format_table(cfg, reports))
    print(f"run written to {out}")


def cmd_eval(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "eval needs --checkpoint")
    model, cfg = X.load_for_eval(args.checkpoint, args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    reports, rows = X.eval_model(model, cfg, _etas(args))
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    X.write_results(out / "results.csv", rows)
    print(X.format_table(cfg, reports))


def cmd_sweep(args):
    cfg = _load_config(args)
    seeds = args.seeds if args.seeds else [cfg.seed]
    if args.mode:
        cfg = replace(cfg, mode=args.mode).validate()
    out = Path(args.out_dir or f"runs/{cfg.name}-sweep")
    _, summary = X.sweep(cfg, seeds, out, _etas(args), jobs=args.jobs)
    for row in summary:
        print(",".join(str(v) for v in row))
    print(f"sweep written to {out}")


def cmd_search_history(args):
    path = Path(args.path)
    if path.is_dir():
        path = path / "search_history.csv"
    if not path.exists():
        raise ConfigError("search-history", f"{path} does not exist")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not body:
        print("empty search history")
        return
    step = max(1, len(body) // args.lines)
    print("  ".join(f"{h:>9}" for h in header))
    shown = body[::step]
    if shown[-1] is not body[-1]:
        shown.append(body[-1])
    for r in shown:
        print("  ".join(f"{v:>9}" for v in r))
    print(f"final fusion layer: {body[-1][1]} after {body[-1][0]} outer steps")


def build_parser():
    p = argparse.ArgumentParser(prog="mmrobust", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=False,
                        help="INI file, or preset:NAME (%s)" % ", ".join(C.preset_names()))
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--eta", type=float, nargs="+", default=None,
                        help="test-time presence ratio(s) of the target modality")

    sp = sub.add_parser("train", help="train one run and evaluate it")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the missing-modality grid")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train + evaluate over several seeds")
    common(sp)
    sp.add_argument("--seeds", type=int, nargs="+", default=None)
    sp.add_argument("--mode", choices=C.MODES, default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("search-history", help="print a run's policy search trajectory")
    sp.add_argument("path", help="run directory or search_history.csv")
    sp.add_argument("--lines", type=int, default=20)
    sp.set_defaults(func=cmd_search_history)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (X.RunFailed, FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
