"""Sensitivity sweeps written as RMSE-vs-factor CSVs.

    python3 scripts/sweeps.py --out runs/sweeps
    python3 scripts/sweeps.py --case lotka_volterra --sweeps replicates

Default: all four sweeps on the colloidal case at desk scale.
"""
import argparse
import logging
import sys
from pathlib import Path

from momentsde.casestudies import CASE_IDS
from momentsde.config import default_config, load_config
from momentsde.experiments import SWEEPS, run_sweep


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", default="colloidal", choices=CASE_IDS)
    ap.add_argument("--config", help="INI run config (overrides --case)")
    ap.add_argument("--sweeps", nargs="+", default=list(SWEEPS), choices=SWEEPS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sweeps")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config) if args.config else default_config(args.case)
    cfg = cfg.with_seed(args.seed)
    for name in args.sweeps:
        rows = run_sweep(cfg, name, Path(args.out) / cfg.case_id)
        for r in rows:
            print(name, ", ".join(f"{k}={v}" for k, v in r.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
