"""Joint torque estimation and assistance shaping.

Muscle-tendon forces are projected onto joints with r = -dL/dtheta, so a
unit that shortens as the joint angle increases pulls the joint in the
positive direction.
"""

import logging
import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .activation import DEFAULT_CUTOFF_HZ, envelope
from .errors import ConvergenceError, DataError
from .geometry import _eval1, _eval2
from .model import Trace
from .muscle import FAILED, MuscleTendonUnit, _cos_pennation, step_kernel, tendon_eval, velocity_filter

log = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 1000.0
DEFAULT_TORQUE_CAP = 40.0


@dataclass(frozen=True)
class AssistanceConfig:
    support_ratio: float = 0.0
    torque_cap: float = DEFAULT_TORQUE_CAP

    def __post_init__(self):
        if not 0.0 <= self.support_ratio <= 1.0:
            raise ValueError(f"support ratio {self.support_ratio} outside [0, 1]")
        if not self.torque_cap > 0:
            raise ValueError("torque cap must be positive")


@dataclass(frozen=True)
class JointTorqueFrame:
    t: float
    tau_bio: MappingProxyType
    tau_support: MappingProxyType


def joint_torque(forces, arms):
    """Sum F * (-dL/dtheta) per joint.

    ``forces`` maps MTU -> N; ``arms`` maps MTU -> {joint: dL/dtheta}.
    """
    if set(forces) != set(arms):
        raise ValueError("forces and moment arms must cover the same MTUs")
    tau = {}
    for name, f in forces.items():
        for joint, d in arms[name].items():
            tau[joint] = tau.get(joint, 0.0) - f * d
    return tau


def shape_assistance(tau_bio, cfg):
    """clamp(ratio * tau, -cap, cap), per joint."""
    if np.ndim(tau_bio) == 0:
        return min(max(cfg.support_ratio * tau_bio, -cfg.torque_cap), cfg.torque_cap)
    return np.clip(cfg.support_ratio * np.asarray(tau_bio, dtype=float), -cfg.torque_cap, cfg.torque_cap)


def resample_grid(traces, rate=SAMPLE_RATE_HZ):
    """Common fixed-rate grid over the overlap of the traces' time spans."""
    t0 = max(tr.time[0] for tr in traces)
    t1 = min(tr.time[-1] for tr in traces)
    if not t1 > t0:
        raise DataError("input traces do not overlap in time")
    dt = 1.0 / rate
    n = int(math.floor((t1 - t0) * rate + 1e-9)) + 1
    return t0 + dt * np.arange(n)


def prepare_inputs(model, emg, angles, emg_mode="envelope", rate=SAMPLE_RATE_HZ, cutoff_hz=DEFAULT_CUTOFF_HZ):
    """Check channels, condition EMG and resample everything to ``rate``.

    Returns (time grid, {channel: excitation}, {joint: angle}).
    """
    missing = [c for c in model.emg_channels if c not in emg.channels]
    if missing:
        raise DataError(f"EMG trace is missing channels required by the model: {missing}")
    missing = [j for j in model.joint_names if j not in angles.channels]
    if missing:
        raise DataError(f"angle trace is missing joints required by the model: {missing}")
    if emg_mode == "raw":
        emg = envelope(emg, cutoff_hz, channels=model.emg_channels)
    elif emg_mode != "envelope":
        raise ValueError(f"unknown EMG mode {emg_mode!r}")
    grid = resample_grid([emg, angles], rate)
    u = {c: np.clip(np.interp(grid, emg.time, emg[c]) / model.mvc[c], 0.0, 1.0) for c in model.emg_channels}
    q = {j: np.interp(grid, angles.time, angles[j]) for j in model.joint_names}
    return grid, u, q


class Pipeline:
    """Streaming torque estimator. One instance per input stream (leg)."""

    def __init__(self, model, cfg=None, dt=1.0 / SAMPLE_RATE_HZ):
        self.model = model
        self.cfg = cfg or AssistanceConfig()
        self.dt = dt
        self._fb = velocity_filter(dt)
        self._joints = model.joint_names
        self._units = []
        for m in model.mtus:
            s = model.geometry[m.name]
            unit = MuscleTendonUnit(m.params, name=m.name)
            jidx = tuple(self._joints.index(d) for d in s.dofs)
            self._units.append((m, s, unit, jidx))
        self._warned = set()
        self.reset()

    def reset(self):
        for _, _, unit, _ in self._units:
            unit.reset()
        self._k = 0

    def push(self, t, excitation, angles):
        """Advance one sample. ``excitation`` maps EMG channel -> u in
        [0, 1]; ``angles`` maps joint -> rad. Returns (tau_bio, tau_support)
        as lists in joint order."""
        q = [angles[j] for j in self._joints]
        tau = [0.0] * len(self._joints)
        dt = self.dt
        fb = self._fb
        for m, s, unit, jidx in self._units:
            ch = m.emg_channel
            if ch is None:
                a = 0.0
            else:
                E = m.params.shape_factor
                a = math.expm1(E * excitation[ch]) / math.expm1(E)
            lo = s.lower
            hi = s.upper
            x = q[jidx[0]]
            if x != x:
                raise DataError(f"NaN joint angle at sample {self._k}")
            xc = min(max(x, lo[0]), hi[0])
            clamped = xc != x
            if len(jidx) == 1:
                lmt, d0 = _eval1(s.knot_vectors[0], s.coefs, xc)
                grads = (d0,)
            else:
                y = q[jidx[1]]
                if y != y:
                    raise DataError(f"NaN joint angle at sample {self._k}")
                yc = min(max(y, lo[1]), hi[1])
                clamped = clamped or yc != y
                lmt, d0, d1 = _eval2(s.knot_vectors[0], s.knot_vectors[1], s.coefs, xc, yc)
                grads = (d0, d1)
            if clamped and m.name not in self._warned:
                self._warned.add(m.name)
                log.warning("%s: joint angles outside geometry domain, clamping (t=%.4f s)", m.name, t)
            p = unit._p
            if lmt <= 0.95 * p[3]:
                raise DataError(f"{m.name}: muscle-tendon length {lmt:.5f} m below 0.95*l_slack at sample {self._k}")
            lm, v, res, status = step_kernel(unit._s, lmt, a, dt, p, *unit._packed_curves, fb, unit.tol,
                                             unit.max_iter)
            if status == FAILED:
                raise ConvergenceError(f"{m.name}: equilibrium solve failed at frame {self._k}",
                                       residual=res, index=self._k)
            ca = _cos_pennation(p[2] * math.sin(p[4]), lm)
            f = p[1] * tendon_eval(unit.curves.tendon, (lmt - lm * ca - p[3]) / p[3])
            for j, d in zip(jidx, grads):
                tau[j] -= f * d
        self._k += 1
        cap = self.cfg.torque_cap
        r = self.cfg.support_ratio
        support = [min(max(r * x, -cap), cap) for x in tau]
        return tau, support

    def frame(self, t, excitation, angles):
        tau, support = self.push(t, excitation, angles)
        return JointTorqueFrame(t, MappingProxyType(dict(zip(self._joints, tau))),
                                MappingProxyType(dict(zip(self._joints, support))))


def torque_columns(joints):
    return [f"{j}_tau_bio" for j in joints] + [f"{j}_tau_support" for j in joints]


def run_pipeline(model, emg, angles, cfg=None, emg_mode="envelope", rate=SAMPLE_RATE_HZ):
    """Stream the inputs through a fresh :class:`Pipeline`.

    Returns a Trace with ``<joint>_tau_bio`` and ``<joint>_tau_support``.
    """
    grid, u, q = prepare_inputs(model, emg, angles, emg_mode, rate)
    pipe = Pipeline(model, cfg, dt=1.0 / rate)
    joints = model.joint_names
    bio = np.empty((grid.size, len(joints)))
    sup = np.empty_like(bio)
    chans = list(u)
    for k in range(grid.size):
        exc = {c: u[c][k] for c in chans}
        ang = {j: q[j][k] for j in joints}
        try:
            bio[k], sup[k] = pipe.push(grid[k], exc, ang)
        except ConvergenceError as exc_:
            raise ConvergenceError(f"pipeline aborted at frame {k} (t={grid[k]:.4f} s): {exc_}",
                                   residual=exc_.residual, index=k) from None
    out = {f"{j}_tau_bio": bio[:, i] for i, j in enumerate(joints)}
    out.update({f"{j}_tau_support": sup[:, i] for i, j in enumerate(joints)})
    return Trace(grid, out)
