"""Calibrate the right-leg example against synthetic data with a known
ground truth and compare recovered parameters.

Usage: python scripts/calibration_demo.py [--evals 3000] [--seed 0]
"""

import argparse

import numpy as np

from nmbc.calibration import CalibrationDataset, CalibrationTrial, calibrate_sa
from nmbc.model import Trace
from nmbc.synth import SynthSpec, example_model, synth_traces
from nmbc.torque import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--evals", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--truth-seed", type=int, default=11)
    ap.add_argument("--noise", type=float, default=0.0)
    args = ap.parse_args()

    model = example_model("right_leg")
    trials, truth = [], None
    for s in (1, 2):
        spec = SynthSpec(duration=3.0, seed=s, truth_seed=args.truth_seed, noise=args.noise)
        emg, ang, truth = synth_traces(model, spec)
        tau = run_pipeline(truth, emg, ang)
        trials.append(CalibrationTrial(f"t{s}", emg, ang,
                                       Trace(tau.time, {j: tau[f"{j}_tau_bio"] for j in model.joint_names})))
    ds = CalibrationDataset(tuple(trials), model.joint_names)
    res = calibrate_sa(ds, model, seed=args.seed, max_evals=args.evals)

    print(f"objective {res.initial_objective:.4g} -> {res.objective:.4g} in {res.n_evals} evaluations")
    for j in model.joint_names:
        peak = max(np.max(np.abs(tr.tau_id[j])) for tr in ds.trials)
        print(f"  {j}: RMSE {res.rmse[j]:.3f} N m ({100 * res.rmse[j] / peak:.2f}% of peak)")
    print(f"\n{'unit':10s} {'param':8s} {'nominal':>10s} {'truth':>10s} {'fitted':>10s}")
    for m in model.mtus:
        t, f = truth.mtu(m.name).params, res.params[m.name]
        for attr in ("shape_factor", "f_max_iso", "l_opt", "l_slack"):
            print(f"{m.name:10s} {attr[:8]:8s} {getattr(m.params, attr):10.4g} {getattr(t, attr):10.4g} "
                  f"{getattr(f, attr):10.4g}")


if __name__ == "__main__":
    main()
