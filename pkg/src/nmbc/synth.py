"""Synthetic gait data and the shipped example models.

The example geometry is analytic (quadratic in joint angle) rather than
derived from a 3-D musculoskeletal model. Angle conventions: ankle
plantarflexion positive, knee flexion positive.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import sample_grid, write_grid
from .model import MtuParams, Trace, load_model, save_model, write_trace
from .torque import AssistanceConfig, run_pipeline

ANKLE_RANGE = (-0.6, 0.6)
KNEE_RANGE = (-0.1, 1.6)
ANKLE_KNOTS = np.linspace(*ANKLE_RANGE, 13)
KNEE_KNOTS = np.linspace(*KNEE_RANGE, 12)

# name: (f_max_iso, l_opt, l_slack, alpha_opt, ankle arm, ankle curvature, knee arm, knee curvature, emg)
# Positive arms shorten the unit with plantarflexion / knee flexion.
MUSCLES = {
    "sol": (3549.0, 0.050, 0.250, 0.436, 0.050, 0.008, 0.0, 0.0, "sol"),
    "gasmed": (1558.0, 0.060, 0.390, 0.297, 0.052, 0.008, 0.020, 0.004, "gasmed"),
    "gaslat": (683.0, 0.064, 0.380, 0.140, 0.048, 0.008, 0.018, 0.004, "gaslat"),
    "tibant": (905.0, 0.098, 0.223, 0.087, -0.040, -0.005, 0.0, 0.0, "tibant"),
    "perlong": (754.0, 0.049, 0.345, 0.175, 0.015, 0.002, 0.0, 0.0, None),
    "perbrev": (435.0, 0.050, 0.161, 0.087, 0.012, 0.002, 0.0, 0.0, None),
    "perter": (180.0, 0.079, 0.100, 0.227, -0.012, -0.002, 0.0, 0.0, None),
}
EMG_MUSCLES = ("sol", "gasmed", "gaslat", "tibant")
MVC = {"sol": 0.40, "gasmed": 0.35, "gaslat": 0.30, "tibant": 0.50}
NOMINAL_E = -1.0

# Excitation bursts per stride: (phase centre, width, peak fraction of MVC)
BURSTS = {
    "sol": [(0.42, 0.10, 0.55)],
    "gasmed": [(0.45, 0.08, 0.50)],
    "gaslat": [(0.45, 0.08, 0.40)],
    "tibant": [(0.03, 0.05, 0.35), (0.76, 0.10, 0.20)],
}
EMG_BASELINE = 0.02

ANKLE_KEYS = [(0.0, 0.0), (0.07, 0.08), (0.30, -0.08), (0.48, -0.17), (0.62, 0.30),
              (0.75, 0.02), (0.88, -0.04)]
KNEE_KEYS = [(0.0, 0.05), (0.15, 0.20), (0.40, 0.06), (0.60, 0.65), (0.72, 1.10), (0.90, 0.35)]


def _periodic(keys):
    ph = [k[0] for k in keys] + [1.0]
    val = [k[1] for k in keys] + [keys[0][1]]
    return CubicSpline(ph, val, bc_type="periodic")


_ANKLE = _periodic(ANKLE_KEYS)
_KNEE = _periodic(KNEE_KEYS)


def _length_fn(spec):
    fmax, lopt, ls, alpha, ra, ca, rk, ck, _ = spec
    l0 = ls * 1.01 + lopt * math.cos(alpha)

    def ankle_only(a):
        return l0 - ra * a + ca * a * a

    def two_joint(a, k):
        return l0 - ra * a + ca * a * a - rk * k + ck * k * k

    return two_joint if rk else ankle_only


def build_example_model(out_dir, sides=("l", "r"), muscles=None, name=None):
    """Write an example model file plus its geometry grids to ``out_dir``.

    The default is the 14-unit bilateral ankle model (7 units per side over
    ankle and knee); returns the model file path.
    """
    muscles = muscles or list(MUSCLES)
    gdir = os.path.join(out_dir, "geometry")
    os.makedirs(gdir, exist_ok=True)
    joints, mtus, mvc = [], [], {}
    for s in sides:
        joints.append({"name": f"ankle_{s}", "range": list(ANKLE_RANGE)})
        joints.append({"name": f"knee_{s}", "range": list(KNEE_RANGE)})
        for mus in muscles:
            spec = MUSCLES[mus]
            fmax, lopt, ls, alpha, ra, ca, rk, ck, emg = spec
            mname = f"{mus}_{s}"
            fn = _length_fn(spec)
            if rk:
                dofs = (f"ankle_{s}", f"knee_{s}")
                grid = sample_grid(mname, dofs, (ANKLE_KNOTS, KNEE_KNOTS), fn)
            else:
                dofs = (f"ankle_{s}",)
                grid = sample_grid(mname, dofs, (ANKLE_KNOTS,), fn)
            write_grid(grid, os.path.join(gdir, f"{mname}.csv"))
            channel = f"{emg}_{s}" if emg else None
            if channel:
                mvc[channel] = MVC[emg]
            mtus.append({
                "name": mname, "joints": list(dofs), "emg": channel, "geometry": f"geometry/{mname}.csv",
                "params": {"shape_factor": NOMINAL_E, "f_max_iso": fmax, "l_opt": lopt, "l_slack": ls,
                           "alpha_opt": alpha, "damping": 0.1},
            })
    doc = {"schema_version": 1, "name": name or ("bilateral_ankle" if len(sides) == 2 else f"leg_{sides[0]}"),
           "joints": joints, "mvc": mvc, "mtus": mtus}
    path = os.path.join(out_dir, "model.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return path


@dataclass
class SynthSpec:
    duration: float = 10.0
    cadence: float = 1.0  # strides per second
    speed: float = 0.5  # m/s, scales burst amplitudes
    seed: int = 0
    noise: float = 0.0  # relative measurement noise on EMG and angles
    variability: float = 0.03  # stride-to-stride amplitude jitter
    support_ratio: float = 0.0  # >0: subject offloads by 1/(1+ratio)
    perturb: float = 1.0  # scale of the ground-truth parameter perturbation
    raw_emg: bool = False
    rate: float = 1000.0
    truth_seed: int = None  # ground-truth draw; defaults to ``seed``
    truth: dict = field(default=None, repr=False)  # mtu -> MtuParams overrides

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.cadence > 0:
            raise ValueError("cadence must be positive")


def _wrapped_bump(phase, centre, width):
    d = (phase - centre + 0.5) % 1.0 - 0.5
    return np.exp(-0.5 * (d / width) ** 2)


def gait_angles(t, cadence, phase0=0.0, amp=None):
    """Ankle and knee angles (rad) for a periodic gait."""
    ph = (cadence * t + phase0) % 1.0
    a = _ANKLE(ph)
    k = _KNEE(ph)
    if amp is not None:
        a = a * amp
    return a, k


def stride_index(t, cadence, phase0=0.0):
    return np.floor(cadence * t + phase0).astype(int)


def truth_params(model, rng, scale=1.0):
    """Ground-truth parameters drawn inside the calibration boxes."""
    out = {}
    for m in model.mtus:
        p = m.params
        out[m.name] = MtuParams(
            shape_factor=float(np.clip(p.shape_factor + scale * rng.uniform(-0.8, 0.8), -2.9, -0.05)),
            f_max_iso=p.f_max_iso * (1.0 + scale * rng.uniform(-0.2, 0.2)),
            l_opt=p.l_opt * (1.0 + scale * rng.uniform(-0.015, 0.015)),
            l_slack=p.l_slack * (1.0 + scale * rng.uniform(-0.03, 0.03)),
            alpha_opt=p.alpha_opt,
            damping=p.damping,
        )
    return out


def synth_traces(model, spec):
    """Generate (emg, angles, truth_model) for ``model``; deterministic in
    ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration * spec.rate)) + 1
    t = np.arange(n) / spec.rate
    sides = sorted({j.name.rsplit("_", 1)[1] for j in model.joints})
    n_strides = int(math.ceil(spec.duration * spec.cadence)) + 2
    gain = math.sqrt(spec.speed / 0.5) / (1.0 + spec.support_ratio)
    angles, emg = {}, {}
    for s in sides:
        phase0 = 0.0 if s == "r" else 0.5
        stride = stride_index(t, spec.cadence, phase0)
        jitter = 1.0 + spec.variability * rng.standard_normal(n_strides)
        amp = jitter[np.clip(stride, 0, n_strides - 1)]
        a, k = gait_angles(t, spec.cadence, phase0, amp)
        if f"ankle_{s}" in model.joint_names:
            angles[f"ankle_{s}"] = a
        if f"knee_{s}" in model.joint_names:
            angles[f"knee_{s}"] = k
        ph = (spec.cadence * t + phase0) % 1.0
        for mus, bursts in BURSTS.items():
            ch = f"{mus}_{s}"
            if ch not in model.mvc:
                continue
            jit = 1.0 + spec.variability * rng.standard_normal(n_strides)
            u = EMG_BASELINE + sum(pk * _wrapped_bump(ph, c, w) for c, w, pk in bursts)
            u = u * gain * jit[np.clip(stride, 0, n_strides - 1)]
            emg[ch] = np.clip(u, 0.0, 1.0) * model.mvc[ch]
    for ch in model.mvc:
        emg.setdefault(ch, np.full(n, EMG_BASELINE * model.mvc[ch]))
    for j in model.joint_names:
        angles.setdefault(j, np.zeros(n))
    if spec.noise > 0:
        for ch in emg:
            emg[ch] = np.maximum(emg[ch] + spec.noise * model.mvc[ch] * rng.standard_normal(n), 0.0)
        for j in angles:
            angles[j] = angles[j] + spec.noise * rng.standard_normal(n)
    if spec.raw_emg:
        # carrier scaled so the rectified mean equals the envelope
        for ch in emg:
            emg[ch] = emg[ch] * math.sqrt(math.pi / 2) * rng.standard_normal(n)
    if spec.truth is not None:
        truth = spec.truth
    elif spec.perturb > 0:
        tseed = spec.seed if spec.truth_seed is None else spec.truth_seed
        truth = truth_params(model, np.random.default_rng([tseed, 7919]), spec.perturb)
    else:
        truth = model.params()
    return Trace(t, emg), Trace(t, angles), model.with_params(truth)


def synth(model, spec, out_dir, prefix=""):
    """Write emg.csv, angles.csv, tau_id.csv, truth.json and manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    emg, angles, truth = synth_traces(model, spec)
    ref_emg = emg
    mode = "raw" if spec.raw_emg else "envelope"
    tau = run_pipeline(truth, ref_emg, angles, AssistanceConfig(0.0), emg_mode=mode)
    tau_id = Trace(tau.time, {j: tau[f"{j}_tau_bio"] for j in model.joint_names})
    files = {"emg": f"{prefix}emg.csv", "angles": f"{prefix}angles.csv", "tau_id": f"{prefix}tau_id.csv"}
    write_trace(emg, os.path.join(out_dir, files["emg"]))
    write_trace(angles, os.path.join(out_dir, files["angles"]))
    write_trace(tau_id, os.path.join(out_dir, files["tau_id"]))
    save_model(truth, os.path.join(out_dir, f"{prefix}truth.json"))
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = {"dofs": list(model.joint_names), "emg_mode": mode, "trials": []}
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    spec_doc = {k: v for k, v in asdict(spec).items() if k != "truth"}
    manifest["trials"] = [tr for tr in manifest["trials"] if tr.get("emg") != files["emg"]]
    manifest["trials"].append({"name": prefix.rstrip("_") or "trial0", **files, "synth": spec_doc})
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return files


def example_model_dir():
    return os.path.join(os.path.dirname(__file__), "data")


def example_model(which="bilateral"):
    """Load a shipped example model: ``bilateral`` (14 units, 4 DOFs) or
    ``right_leg`` (4 EMG-driven units, right ankle and knee)."""
    return load_model(os.path.join(example_model_dir(), which, "model.json"))
