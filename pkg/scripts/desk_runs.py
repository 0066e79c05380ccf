"""Desk-scale generate/train/evaluate for every case study.

    python3 scripts/desk_runs.py --out runs [--cases colloidal sir] [--seed 0]
"""
import argparse
import sys
from pathlib import Path

from momentsde.cli import main as cli
from momentsde.casestudies import CASE_IDS


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--cases", nargs="+", default=list(CASE_IDS), choices=CASE_IDS)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--propagator", default="ut2m")
    args = ap.parse_args(argv)
    for case in args.cases:
        out = Path(args.out) / f"{case}-desk-s{args.seed}-{args.propagator}"
        rc = cli(["reproduce", case, "--out", str(out), "--seed", str(args.seed),
                  "--propagator", args.propagator, "--scale", "desk"])
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
