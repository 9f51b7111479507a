"""Series-elastic exoskeleton benchmarks: sinusoid tracking under gait
motion, step settling time and ring-down across passive environments.

Usage: python scripts/exo_tracking.py [--out-dir exo_out]
"""

import argparse
import os

import numpy as np

from nmbc.exo import (DobController, JointEnvironment, SeaPlant, gait_motion, settling_time, simulate,
                      sinusoid_reference, step_reference, transparency_metric)
from nmbc.model import Trace, write_trace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="exo_out")
    ap.add_argument("--duration", type=float, default=10.0)
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    plant = SeaPlant()

    for label, ctrl in (("dob", DobController()), ("pd-only", DobController(dob=False))):
        res = simulate(plant, ctrl, sinusoid_reference(args.duration), gait_motion(args.duration))
        write_trace(res.to_trace(), os.path.join(args.out_dir, f"tracking_{label}.csv"))
        zero = Trace(res.time, {"tau_ref": np.zeros_like(res.time)})
        free = simulate(plant, ctrl, zero, gait_motion(args.duration))
        print(f"{label:8s} tracking RMS {res.rms_error:6.3f} N m   "
              f"zero-torque residual {transparency_metric(free):6.3f} N m")

    step = simulate(plant, DobController(), step_reference(1.5, level=10.0, t_step=0.1))
    write_trace(step.to_trace(), os.path.join(args.out_dir, "step.csv"))
    print(f"step settling time (2% band) {1000 * settling_time(step, 10.0, 0.02, 0.1):.1f} ms")

    t = np.arange(0, 8.0, 1e-3)
    pulse = Trace(t, {"tau_ref": np.where((t >= 0.2) & (t < 0.5), 10.0, 0.0)})
    print("\nresidual |tau_exo| peak in the last second after a 10 N m pulse (N m)")
    damping = (0.0, 0.3, 1.0, 5.0, 20.0)
    print("k \\ b    " + "".join(f"{b:>10.1f}" for b in damping))
    for k in (0.0, 30.0, 300.0, 3000.0, 10000.0):
        row = []
        for b in damping:
            r = simulate(plant, DobController(), pulse, environment=JointEnvironment(k, b))
            row.append(np.max(np.abs(r.tau_exo[r.time >= 7])))
        print(f"{k:8.0f} " + "".join(f"{x:10.2e}" for x in row))


if __name__ == "__main__":
    main()
