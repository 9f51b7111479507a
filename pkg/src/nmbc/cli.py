"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical
failure. Logs go to stderr; set ``NMBC_LOG`` (DEBUG, INFO, WARNING, ERROR)
to change verbosity.
"""

import argparse
import csv
import json
import logging
import os
import shutil
import sys

import numpy as np

from .errors import DataError, NmbcError

log = logging.getLogger("nmbc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_rows(path, columns, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r[c] is None else (format(r[c], ".17g") if isinstance(r[c], float) else r[c])
                        for c in columns])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _emit_trace(trace, path, columns=None):
    from .model import write_trace

    if path in (None, "-"):
        names = list(columns or trace.names)
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["time"] + names)
        for k in range(len(trace)):
            w.writerow([format(trace.time[k], ".17g")] + [format(trace[n][k], ".17g") for n in names])
    else:
        write_trace(trace, path, columns)


# --- commands ----------------------------------------------------------------


def cmd_synth(args):
    from .model import load_model
    from .synth import SynthSpec, example_model_dir, synth

    if args.export_model:
        src = os.path.join(example_model_dir(), args.example)
        if os.path.exists(args.export_model):
            raise DataError(f"{args.export_model} already exists")
        shutil.copytree(src, args.export_model)
        log.info("example model %r written to %s", args.example, args.export_model)
        if not args.out:
            return 0
    if not args.out:
        raise DataError("--out is required unless only exporting a model")
    model = load_model(args.model) if args.model else load_model(
        os.path.join(example_model_dir(), args.example, "model.json"))
    truth = load_model(args.truth).params() if args.truth else None
    spec = SynthSpec(duration=args.duration, cadence=args.cadence, speed=args.speed, seed=args.seed,
                     noise=args.noise, support_ratio=args.support_ratio, raw_emg=args.raw_emg,
                     perturb=args.perturb, truth_seed=args.truth_seed, truth=truth)
    files = synth(model, spec, args.out, prefix=args.prefix)
    log.info("wrote %s to %s", ", ".join(files.values()), args.out)
    return 0


def cmd_pretune(args):
    from .calibration import pretune_model
    from .model import load_model, save_model

    scaled = load_model(args.scaled)
    unscaled = load_model(args.unscaled)
    if set(scaled.mtu_names) != set(unscaled.mtu_names):
        raise DataError("scaled and unscaled models list different muscle-tendon units")
    model, results = pretune_model(scaled, unscaled)
    save_model(model, args.out)
    rows = [{"mtu": n, "l_opt": r.l_opt, "l_slack": r.l_slack, "objective": r.objective,
             "converged": int(r.converged)} for n, r in results.items()]
    _write_rows(args.report, ["mtu", "l_opt", "l_slack", "objective", "converged"], rows)
    bad = [n for n, r in results.items() if not r.converged]
    if bad:
        log.warning("pretune did not converge for %s; best points written", bad)
    return 0


def cmd_calibrate(args):
    from .calibration import calibrate_sa, load_dataset
    from .model import load_model, save_model

    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    res = calibrate_sa(ds, model, seed=args.seed, max_evals=args.max_evals)
    save_model(model.with_params(res.params), args.out)
    for dof, v in res.rmse.items():
        log.info("%s torque RMSE %.4g N*m", dof, v)
    log.info("objective %.6g -> %.6g (N*m)^2 in %d evaluations", res.initial_objective, res.objective,
             res.n_evals)
    if args.history:
        _write_rows(args.history, ["step", "best_objective"],
                    [{"step": i, "best_objective": float(v)} for i, v in enumerate(res.history)])
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(res.summary(), fh, indent=2)
            fh.write("\n")
    return 0


def cmd_run(args):
    from .model import load_model, load_trace
    from .torque import AssistanceConfig, run_pipeline, torque_columns

    model = load_model(args.model)
    emg = load_trace(args.emg)
    angles = load_trace(args.angles)
    cfg = AssistanceConfig(args.support_ratio, args.torque_cap)
    out = run_pipeline(model, emg, angles, cfg, emg_mode=args.emg_mode)
    _emit_trace(out, args.out, torque_columns(model.joint_names))
    return 0


def cmd_simulate_exo(args):
    from .exo import DobController, SeaPlant, simulate
    from .model import Trace, load_trace

    ref = load_trace(args.ref)
    if args.ref_column:
        if args.ref_column not in ref.channels:
            raise DataError(f"{args.ref}: no column {args.ref_column!r}")
        ref = Trace(ref.time, {"tau_ref": ref[args.ref_column]})
    motion = None
    if args.motion:
        motion = load_trace(args.motion)
        if args.motion_column:
            if args.motion_column not in motion.channels:
                raise DataError(f"{args.motion}: no column {args.motion_column!r}")
            motion = Trace(motion.time, {"angle": motion[args.motion_column]})
    plant = SeaPlant(motor_inertia=args.motor_inertia, friction=args.friction)
    ctrl = DobController(kp=args.kp, kd=args.kd, q_cutoff_hz=args.q_cutoff, dob=not args.no_dob,
                         virtual_damping=args.virtual_damping)
    res = simulate(plant, ctrl, ref, motion)
    log.info("tracking RMS error %.4g N*m", res.rms_error)
    _emit_trace(res.to_trace(), args.out, ["tau_ref", "tau_exo", "tau_dist", "angle"])
    return 0


def cmd_analyze(args):
    from .gait import REPORT_COLUMNS, analyze_session

    path = os.path.join(args.session, "session.json") if os.path.isdir(args.session) else args.session
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding="utf-8") as fh:
            session = json.load(fh)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        for c in session["conditions"]:
            c["files"] = [os.path.join(base, f) for f in c["files"]]
        session["knee"]
    except (KeyError, TypeError):
        raise DataError(f"{path}: needs 'conditions' (label, files) and 'knee'") from None
    try:
        rows = analyze_session(session)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    _write_rows(args.out, list(REPORT_COLUMNS), rows)
    return 0


def cmd_dump_curves(args):
    from .muscle import (ACTIVE_FL_X, FV_X, PASSIVE_FL_X, TENDON_CUTOFF, default_curves)

    c = default_curves()
    fns = {"active_fl": c.active_fl, "passive_fl": c.passive_fl, "fv": c.fv, "tendon": c.tendon_force}
    if args.samples:
        spans = {"active_fl": (0.0, 2.0), "passive_fl": (0.8, 1.8), "fv": (-1.2, 1.2),
                 "tendon": (-0.005, 4 * TENDON_CUTOFF)}
        xs = {k: np.linspace(*v, args.samples) for k, v in spans.items()}
    else:
        xs = {"active_fl": ACTIVE_FL_X, "passive_fl": PASSIVE_FL_X, "fv": FV_X,
              "tendon": [0.0, TENDON_CUTOFF / 2, TENDON_CUTOFF, 2 * TENDON_CUTOFF]}
    rows = [{"curve": k, "x": float(x), "y": float(fns[k](float(x)))} for k in fns for x in xs[k]]
    _write_rows(args.out, ["curve", "x", "y"], rows)
    return 0


# --- parser ------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="nmbc", description="EMG-driven joint torque estimation, calibration and exoskeleton "
                                        "assistance tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic gait data (EMG, angles, reference torque)")
    s.add_argument("--out", help="output directory (files are added to its manifest.json)")
    s.add_argument("--model", help="model file; default is the shipped example")
    s.add_argument("--example", default="right_leg", choices=["right_leg", "bilateral"])
    s.add_argument("--export-model", metavar="DIR", help="copy the example model (with geometry) to DIR")
    s.add_argument("--duration", type=float, default=10.0, help="seconds (default 10)")
    s.add_argument("--cadence", type=float, default=1.0, help="strides per second (default 1)")
    s.add_argument("--speed", type=float, default=0.5, help="walking speed in m/s, scales EMG (default 0.5)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--truth-seed", type=int, default=None,
                   help="seed of the ground-truth parameter draw (default: --seed)")
    s.add_argument("--truth", help="model file whose parameters are the ground truth")
    s.add_argument("--perturb", type=float, default=1.0, help="ground-truth perturbation scale, 0 = nominal")
    s.add_argument("--noise", type=float, default=0.0, help="relative measurement noise")
    s.add_argument("--support-ratio", type=float, default=0.0,
                   help="simulate an assisted subject whose EMG drops by 1/(1+ratio)")
    s.add_argument("--raw-emg", action="store_true", help="write raw EMG instead of envelopes")
    s.add_argument("--prefix", default="", help="file name prefix inside --out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretune", help="fit optimal fiber and tendon slack lengths to a scaled geometry")
    s.add_argument("--scaled", required=True, help="model file with the scaled geometry")
    s.add_argument("--unscaled", required=True, help="model file with the generic geometry and parameters")
    s.add_argument("--out", required=True, help="pre-tuned model file")
    s.add_argument("--report", default="-", help="per-unit CSV report (default stdout)")
    s.set_defaults(func=cmd_pretune)

    s = sub.add_parser("calibrate", help="simulated-annealing calibration against reference torques")
    s.add_argument("--dataset", required=True, help="directory with manifest.json and trial CSVs")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True, help="calibrated model file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-evals", type=int, default=100_000)
    s.add_argument("--history", help="CSV of the best objective per evaluation")
    s.add_argument("--report", help="JSON summary (objective, per-DOF RMSE, parameters)")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("run", help="estimate joint torques and assistance from EMG and angles")
    s.add_argument("--model", required=True)
    s.add_argument("--emg", required=True)
    s.add_argument("--angles", required=True)
    s.add_argument("--support-ratio", type=float, default=0.0)
    s.add_argument("--torque-cap", type=float, default=40.0, help="per-joint assistance cap, N*m")
    s.add_argument("--emg-mode", choices=["envelope", "raw"], default="envelope")
    s.add_argument("--out", default="-", help="output CSV (default stdout)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("simulate-exo", help="simulate the actuator torque loop")
    s.add_argument("--ref", required=True, help="CSV with a tau_ref column")
    s.add_argument("--ref-column", help="use this column as the torque reference")
    s.add_argument("--motion", help="CSV with the joint angle (rad); locked joint if omitted")
    s.add_argument("--motion-column", help="use this column as the joint angle")
    s.add_argument("--out", default="-")
    s.add_argument("--kp", type=float, default=1.8)
    s.add_argument("--kd", type=float, default=0.02)
    s.add_argument("--q-cutoff", type=float, default=30.0, help="observer filter cutoff, Hz")
    s.add_argument("--virtual-damping", type=float, default=1.5, help="N*m*s/rad")
    s.add_argument("--motor-inertia", type=float, default=0.12, help="reflected, kg*m^2")
    s.add_argument("--friction", type=float, default=1.0, help="reflected viscous friction, N*m*s/rad")
    s.add_argument("--no-dob", action="store_true", help="disable the disturbance observer")
    s.set_defaults(func=cmd_simulate_exo)

    s = sub.add_parser("analyze", help="gait-cycle RMS summaries and percent change between conditions")
    s.add_argument("--session", required=True, help="directory containing session.json, or the file")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("dump-curves", help="write the normalized force curves as CSV")
    s.add_argument("--out", default="-")
    s.add_argument("--samples", type=int, default=0, help="dense samples per curve instead of the knots")
    s.set_defaults(func=cmd_dump_curves)
    return p


def _setup_logging():
    level = os.environ.get("NMBC_LOG", "INFO").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NmbcError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except ValueError as exc:
        # invalid option values rejected by the library
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
