"""Write densely sampled force-length, force-velocity and tendon curves.

Usage: python scripts/dump_curves.py [--out curves.csv] [--samples 400]
"""

import argparse
import sys

from nmbc.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="curves.csv")
    ap.add_argument("--samples", type=int, default=400)
    args = ap.parse_args()
    sys.exit(main(["dump-curves", "--out", args.out, "--samples", str(args.samples)]))
