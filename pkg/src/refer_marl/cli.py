"""Command-line entry point: train, eval, verify, plot.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

logger = logging.getLogger("refer_marl")


def _progress(every: int):
    def report(rec: dict) -> None:
        if (rec["episode"] + 1) % every == 0:
            print(f"episode {rec['episode'] + 1:>6}  return {rec['mean_return']:8.3f}  "
                  f"f_off {rec['f_off']:.3f}  beta {rec['beta']:.3f}  steps {rec['train_steps']}", flush=True)
    return report


def cmd_train(args) -> int:
    from .trainer import run_training

    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.max_episodes is not None:
        overrides["max_episodes"] = args.max_episodes
    if overrides:
        cfg = cfg.from_dict({**cfg.to_dict(), **overrides})
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.env}-{cfg.variant}-s{cfg.seed}"
    tr = run_training(cfg, out, resume=args.resume, progress=None if args.quiet else _progress(args.log_every))
    print(f"trained {tr.episodes_done} episodes, {tr.train_steps} gradient steps -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import Trainer, evaluate

    tr = Trainer.load(args.checkpoint)
    res = evaluate(tr, args.episodes, greedy=args.greedy)
    if args.json:
        print(json.dumps(res))
    else:
        print(f"episodes {res['episodes']}  mean {res['mean_return']:.4f}  "
              f"median {res['median_return']:.4f}  std {res['std_return']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import CHECKS, report, run_checks

    if args.list:
        print("\n".join(CHECKS))
        return EXIT_OK
    unknown = sorted(set(args.check or ()) - set(CHECKS))
    if unknown:
        raise ConfigError(f"unknown checks: {', '.join(unknown)}")
    results = run_checks(quick=args.quick, only=args.check or None)
    print(report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_plot(args) -> int:
    from .plotting import plot_metrics

    csv_path, png_path = plot_metrics(args.metrics, args.out, window=args.window)
    print(f"wrote {csv_path} and {png_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refer-marl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--variant", choices=["LDI", "LDCo", "FDI", "FDCo"])
    t.add_argument("--max-episodes", type=int)
    t.add_argument("--out", help="run directory (default runs/<env>-<variant>-s<seed>)")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.npz if present")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="roll out a checkpointed policy without training")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, required=True)
    e.add_argument("--greedy", action="store_true")
    e.add_argument("--json", action="store_true")
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("verify", help="run the numerical self-checks")
    v.add_argument("--quick", action="store_true")
    v.add_argument("--check", action="append", metavar="NAME",
                   help="run only this check (repeatable); `verify --list` shows the names")
    v.add_argument("--list", action="store_true", help="list the check names and exit")
    v.set_defaults(fn=cmd_verify)

    pl = sub.add_parser("plot", help="moving-median curves of a metrics file (CSV + PNG)")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", help="output prefix (default <metrics>_curves)")
    pl.add_argument("--window", type=int, default=100)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
