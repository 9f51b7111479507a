"""Full command-line workflow on synthetic data: synthesize training trials,
calibrate, synthesize unassisted and assisted walking, estimate torques and
compare conditions.

Usage: python scripts/end_to_end.py [--work e2e_out] [--evals 1500]
"""

import argparse
import csv
import json
import os
import shutil
import sys

from nmbc.cli import main as nmbc


def run(*argv):
    code = nmbc(list(argv))
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="e2e_out")
    ap.add_argument("--evals", type=int, default=1500)
    ap.add_argument("--support-ratio", type=float, default=0.5)
    args = ap.parse_args()
    w = args.work
    if os.path.exists(w):
        shutil.rmtree(w)
    model = os.path.join(w, "model", "model.json")
    run("synth", "--export-model", os.path.join(w, "model"))
    for seed, prefix in ((1, "a_"), (2, "b_")):
        run("synth", "--out", os.path.join(w, "train"), "--model", model, "--duration", "3",
            "--seed", str(seed), "--truth-seed", "11", "--prefix", prefix)
    cal = os.path.join(w, "calibrated.json")
    run("calibrate", "--dataset", os.path.join(w, "train"), "--model", model, "--out", cal,
        "--max-evals", str(args.evals), "--report", os.path.join(w, "calibration.json"))
    conditions = []
    for label, ratio in (("baseline", 0.0), ("assisted", args.support_ratio)):
        d = os.path.join(w, label)
        run("synth", "--out", d, "--model", model, "--duration", "10", "--seed", "5", "--truth-seed", "11",
            "--support-ratio", str(ratio))
        run("run", "--model", cal, "--emg", os.path.join(d, "emg.csv"), "--angles", os.path.join(d, "angles.csv"),
            "--support-ratio", str(args.support_ratio), "--out", os.path.join(d, "tau.csv"))
        conditions.append({"label": label, "files": [f"{label}/angles.csv", f"{label}/tau.csv"]})
    with open(os.path.join(w, "session.json"), "w", encoding="utf-8") as fh:
        json.dump({"conditions": conditions, "baseline": "baseline", "knee": "knee_r",
                   "channels": ["ankle_r_tau_bio", "knee_r_tau_bio"]}, fh, indent=2)
    report = os.path.join(w, "report.csv")
    run("analyze", "--session", w, "--out", report)
    with open(report, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            change = r["percent_change"] or "-"
            print(f"{r['condition']:9s} {r['channel']:16s} RMS {float(r['mean_rms']):8.3f}  "
                  f"cycles {r['n_cycles']:>3s}  change {change}")


if __name__ == "__main__":
    main()
