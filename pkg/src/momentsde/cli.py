"""Command line: generate, train, evaluate, reproduce.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import casestudies as cs
from . import experiments as ex
from .config import RunConfig, default_config, load_config
from .propagation import PROPAGATORS
from .training import ConfigError

log = logging.getLogger("momentsde")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="momentsde", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, case_required=False):
        sp.add_argument("case", nargs=None if case_required else "?", choices=cs.CASE_IDS,
                        help="case study id")
        sp.add_argument("--config", help="INI run config")
        sp.add_argument("--scale", choices=("desk", "paper"))
        sp.add_argument("--seed", type=int, help="base seed for data, split and init")
        sp.add_argument("--out", help="run directory")

    g = sub.add_parser("generate", help="simulate ensembles and write the moment file")
    common(g)
    g.add_argument("--replicates", type=int, help="replicates per initial condition")
    g.add_argument("--trajectories", action="store_true", help="also write trajectory CSVs")

    t = sub.add_parser("train", help="train hidden-physics nets on a moment file")
    common(t)
    t.add_argument("--propagator", choices=PROPAGATORS)

    e = sub.add_parser("evaluate", help="RMSE, grid CSVs and KL validation report")
    common(e)
    e.add_argument("--kde", action="store_true", help="write KDE time-evolution CSV")
    e.add_argument("--no-kl", action="store_true", help="skip the KL validation")
    e.add_argument("--truth", action="store_true",
                   help="evaluate the ground-truth functions instead of checkpoints")

    r = sub.add_parser("reproduce", help="generate, train and evaluate in one go")
    common(r, case_required=True)
    r.add_argument("--propagator", choices=PROPAGATORS)
    r.add_argument("--sweep", choices=ex.SWEEPS, help="run a sensitivity sweep instead")
    return p


def resolve_config(args) -> tuple:
    """Run config and run directory from the CLI arguments."""
    cfg = None
    if args.config:
        cfg = load_config(args.config)
    elif args.out and (Path(args.out) / "config.ini").exists() and args.command != "generate":
        cfg = load_config(Path(args.out) / "config.ini")
    if cfg is None:
        if not args.case:
            raise UsageError("give a case id, --config, or --out of an existing run")
        cfg = default_config(args.case, args.scale or "desk")
    elif args.case and args.case != cfg.case_id:
        raise UsageError(f"case {args.case!r} conflicts with config case {cfg.case_id!r}")
    if args.scale and args.scale != cfg.scale:
        if args.config:
            raise UsageError("--scale conflicts with the config file")
        cfg = default_config(cfg.case_id, args.scale)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "propagator", None):
        cfg = cfg.replace("train", propagator=args.propagator)
    if getattr(args, "replicates", None) is not None:
        cfg = cfg.replace("data", n_replicates=args.replicates)
    if getattr(args, "trajectories", False):
        cfg = cfg.replace("data", write_trajectories=True)
    if getattr(args, "kde", False):
        cfg = cfg.replace("eval", write_kde=True)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.case_id}-{cfg.scale}"
    return cfg, out


def _run(args) -> int:
    cfg, out = resolve_config(args)
    if args.command == "generate":
        gen = ex.run_generate(cfg, out)
        print(f"{gen.dataset.n_groups} groups, {gen.dataset.n_records} records -> "
              f"{out / 'moments.csv'}")
    elif args.command == "train":
        if not (out / "moments.csv").exists():
            raise UsageError(f"no moments.csv in {out}; run generate first")
        model = ex.run_train(cfg, out)
        for h in model.history:
            print(f"{h.name}: best validation loss {h.best_val_loss:.6g} at epoch "
                  f"{h.best_epoch}")
    elif args.command == "evaluate":
        summary = ex.run_evaluate(cfg, out, use_truth=args.truth, with_kl=not args.no_kl)
        _print_summary(summary)
    elif args.command == "reproduce":
        if args.sweep:
            rows = ex.run_sweep(cfg, args.sweep, out)
            for r in rows:
                print(", ".join(f"{k}={v}" for k, v in r.items()))
        else:
            _print_summary(ex.reproduce(cfg, out))
    print(f"run directory: {out}")
    return EXIT_OK


def _print_summary(summary: dict) -> None:
    for k, v in summary["rmse"].items():
        print(f"rmse {k}: {v:.4g}")
    if summary.get("kl"):
        for k, v in summary["kl"].items():
            print(f"kl {k}: {v:.4g}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigError) as exc:
        print(f"momentsde: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures of any stage
        log.debug("runtime failure", exc_info=True)
        print(f"momentsde: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
