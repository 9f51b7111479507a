"""Series-elastic actuator simulation with a disturbance-observer torque loop.

Plant: a motor whose inertia and viscous friction are reflected through the
gearbox to the output side, connected to the joint by a torsional spring.
The spring torque ``tau_exo = k * (phi_motor - theta_joint)`` is the
measured interaction torque.

Controller, once per sample:

    d_hat = Q * Tn^-1 * tau_exo  -  Q * c_prev     (disturbance observer)
    c     = tau_ref - b_v * H * theta_dot - d_hat
    tau_m = c + kp * (c - tau_exo) - kd * d(tau_exo)/dt

``tau_m`` is then saturated (torque limit, and no further acceleration past
the speed limit) and ``c_prev`` is the command the saturated torque
realizes, which keeps the observer from winding up.

where ``Tn`` is the nominal closed inner loop (rigid motor inertia behind
the spring, no friction) and ``Q`` a second-order low-pass. The observer
alone renders slightly negative damping near 10-15 Hz at the interaction
port, so a virtual damping ``b_v`` acts on the encoder velocity through a
first-order high-pass ``H``; a high-pass has a non-negative real part at
every frequency, so it only ever adds damping, and it leaves slow gait
motion nearly untouched. The motor
torque is held over the sample and the plant is integrated with implicit
midpoint substeps, which makes the discrete energy balance exact.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.signal import bilinear

from .errors import DataError, DivergenceError
from .model import Trace
from .torque import resample_grid

log = logging.getLogger(__name__)

SPRING_K = 1534.0  # N*m/rad
GEAR_RATIO = 100.0
MOTOR_INERTIA = 0.12  # kg*m^2, reflected to the output
TORQUE_LIMIT = 100.0  # N*m
SPEED_LIMIT = 5.0  # rad/s at the output
DIVERGENCE_FACTOR = 10.0


@dataclass(frozen=True)
class SeaPlant:
    spring_k: float = SPRING_K
    gear_ratio: float = GEAR_RATIO
    motor_inertia: float = MOTOR_INERTIA
    friction: float = 1.0  # viscous, N*m*s/rad at the output; not in the nominal model
    torque_limit: float = TORQUE_LIMIT
    speed_limit: float = SPEED_LIMIT
    dt: float = 1e-3
    substeps: int = 10

    def __post_init__(self):
        for name in ("spring_k", "gear_ratio", "motor_inertia", "torque_limit", "speed_limit", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.friction < 0:
            raise ValueError("friction must be non-negative")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


@dataclass(frozen=True)
class DobController:
    kp: float = 1.8
    kd: float = 0.02  # s
    q_cutoff_hz: float = 30.0
    q_damping: float = 1.0 / math.sqrt(2.0)
    nominal_k: float = SPRING_K
    nominal_inertia: float = MOTOR_INERTIA
    virtual_damping: float = 1.5  # N*m*s/rad
    damping_hp_hz: float = 10.0
    dob: bool = True

    def __post_init__(self):
        if not self.q_cutoff_hz > 0:
            raise ValueError("q_cutoff_hz must be positive")
        if self.kp < 0 or self.kd < 0 or self.virtual_damping < 0:
            raise ValueError("gains must be non-negative")
        if not self.damping_hp_hz > 0:
            raise ValueError("damping_hp_hz must be positive")
        if not (self.nominal_k > 0 and self.nominal_inertia > 0):
            raise ValueError("nominal plant constants must be positive")

    def inner_loop(self):
        """Natural frequency (rad/s) and damping ratio of the nominal inner loop."""
        wn2 = (1.0 + self.kp) * self.nominal_k / self.nominal_inertia
        wn = math.sqrt(wn2)
        return wn, self.kd * self.nominal_k / self.nominal_inertia / (2.0 * wn)

    def filters(self, dt):
        """Tustin discretizations of Q*Tn^-1 and Q as (b, a) pairs."""
        wn, zn = self.inner_loop()
        wq = 2.0 * math.pi * self.q_cutoff_hz
        den_q = [1.0, 2.0 * self.q_damping * wq, wq * wq]
        num_inv = [wq * wq / (wn * wn), wq * wq * 2.0 * zn / wn, wq * wq]
        b1, a1 = bilinear(num_inv, den_q, fs=1.0 / dt)
        bq, aq = bilinear([wq * wq], den_q, fs=1.0 / dt)
        for a in (a1, aq):
            if np.any(np.abs(np.roots(a)) >= 1.0):
                raise ValueError("observer filter is unstable at this sample time")
        return (b1 / a1[0], a1 / a1[0]), (bq / aq[0], aq / aq[0])

    def damping_filter(self, dt):
        """Tustin high-pass ``b_v * s / (s + w_h)`` as (b, a) of length 2."""
        wh = 2.0 * math.pi * self.damping_hp_hz
        if self.virtual_damping == 0.0:
            return np.zeros(2), np.array([1.0, 0.0])
        b, a = bilinear([self.virtual_damping, 0.0], [1.0, wh], fs=1.0 / dt)
        return b / a[0], a / a[0]


@dataclass(frozen=True)
class JointEnvironment:
    """Passive joint load: inertia, stiffness and damping about zero."""

    stiffness: float = 0.0
    damping: float = 0.0
    inertia: float = 0.05

    def __post_init__(self):
        if self.stiffness < 0 or self.damping < 0 or not self.inertia > 0:
            raise ValueError("environment needs stiffness, damping >= 0 and inertia > 0")


@dataclass(frozen=True, eq=False)
class SimResult:
    time: np.ndarray
    tau_ref: np.ndarray
    tau_exo: np.ndarray
    tau_dist: np.ndarray
    angle: np.ndarray
    tau_motor: np.ndarray
    energy: np.ndarray  # stored (kinetic + spring) energy at each sample, J
    work: np.ndarray  # cumulative net work in (motor + joint - friction), J

    @property
    def rms_error(self):
        e = self.tau_exo - self.tau_ref
        return float(np.sqrt(np.mean(e * e)))

    def to_trace(self):
        return Trace(self.time, {"tau_ref": self.tau_ref, "tau_exo": self.tau_exo, "tau_dist": self.tau_dist,
                                 "angle": self.angle})


def _midpoint_maps(a, b, h):
    """x1 = P x0 + R u for x' = A x + B u under the implicit midpoint rule."""
    n = a.shape[0]
    lhs = np.eye(n) - 0.5 * h * a
    return np.linalg.solve(lhs, np.eye(n) + 0.5 * h * a), np.linalg.solve(lhs, h * b)


@njit(cache=True)
def _filter_step(b, a, z, x):
    y = b[0] * x + z[0]
    z[0] = b[1] * x - a[1] * y + z[1]
    z[1] = b[2] * x - a[2] * y
    return y


@njit(cache=True)
def _run(ref, theta, env, P, R, k, jm, bm, jenv, kenv, benv, kp, kd, use_dob, b1, a1, bq, aq, bh, ah,
         tlim, vlim, dt, nsub, div_lim, out_exo, out_dist, out_tm, out_angle, out_energy, out_work):
    """Returns the index of the first diverged sample, or -1."""
    n = ref.shape[0]
    x = np.zeros(4)  # phi, omega, theta, theta_dot
    if not env:
        x[2] = theta[0]
        x[0] = theta[0]
    z1 = np.zeros(2)
    zq = np.zeros(2)
    c_prev = 0.0
    tau_prev = 0.0
    th_prev = 0.0
    zh = 0.0
    work = 0.0
    for i in range(n):
        th = x[2] if env else theta[i]
        tau_e = k * (x[0] - th)
        if abs(tau_e) > div_lim or tau_e != tau_e:
            return i
        if use_dob:
            d_hat = _filter_step(b1, a1, z1, tau_e) - _filter_step(bq, aq, zq, c_prev)
        else:
            d_hat = 0.0
        vel = 0.0 if i == 0 else (th - th_prev) / dt
        damp = bh[0] * vel + zh
        zh = bh[1] * vel - ah[1] * damp
        c = ref[i] - damp - d_hat
        deriv = 0.0 if i == 0 else (tau_e - tau_prev) / dt
        tm = c + kp * (c - tau_e) - kd * deriv
        if tm > tlim:
            tm = tlim
        elif tm < -tlim:
            tm = -tlim
        # speed limit: no further acceleration beyond the limit
        if x[1] >= vlim and tm > tau_e:
            tm = tau_e
        elif x[1] <= -vlim and tm < tau_e:
            tm = tau_e
        # anti-windup: the observer sees the command that the saturated
        # motor torque actually realizes
        c = (tm + kp * tau_e + kd * deriv) / (1.0 + kp)
        out_exo[i] = tau_e
        out_dist[i] = d_hat
        out_tm[i] = tm
        out_angle[i] = th
        kin = 0.5 * jm * x[1] * x[1]
        spring = 0.5 * k * (x[0] - th) ** 2
        if env:
            kin += 0.5 * jenv * x[3] * x[3]
            spring += 0.5 * kenv * x[2] * x[2]
        out_energy[i] = kin + spring
        out_work[i] = work
        c_prev = c
        tau_prev = tau_e
        th_prev = th
        if i == n - 1:
            break
        h = dt / nsub
        for s in range(nsub):
            if env:
                x0 = x.copy()
                for r in range(4):
                    acc = R[r, 0] * tm
                    for q in range(4):
                        acc += P[r, q] * x0[q]
                    x[r] = acc
                w_mid = 0.5 * (x0[1] + x[1])
                v_mid = 0.5 * (x0[3] + x[3])
                work += tm * (x[0] - x0[0]) - bm * w_mid * w_mid * h - benv * v_mid * v_mid * h
            else:
                th0 = theta[i] + (theta[i + 1] - theta[i]) * s / nsub
                th1 = theta[i] + (theta[i + 1] - theta[i]) * (s + 1) / nsub
                th_mid = 0.5 * (th0 + th1)
                p0 = x[0]
                w0 = x[1]
                x[0] = P[0, 0] * p0 + P[0, 1] * w0 + R[0, 0] * tm + R[0, 1] * th_mid
                x[1] = P[1, 0] * p0 + P[1, 1] * w0 + R[1, 0] * tm + R[1, 1] * th_mid
                w_mid = 0.5 * (w0 + x[1])
                delta_mid = 0.5 * (p0 + x[0]) - th_mid
                work += tm * (x[0] - p0) - k * delta_mid * (th1 - th0) - bm * w_mid * w_mid * h
                x[2] = th1
    return -1


def _channel(trace, preferred):
    if preferred in trace.channels:
        return trace[preferred]
    if len(trace.names) == 1:
        return trace[trace.names[0]]
    raise DataError(f"trace needs a {preferred!r} column")


def simulate(plant, ctrl, tau_ref, joint_motion=None, environment=None):
    """Simulate the torque loop tracking ``tau_ref``.

    The joint either follows ``joint_motion`` (a Trace with an ``angle``
    column, rad) or is a passive ``environment``; with neither, the joint
    is locked at zero. Inputs are resampled onto the plant's sample grid.
    Raises DivergenceError if the spring torque leaves
    +-10 * torque_limit.
    """
    if joint_motion is not None and environment is not None:
        raise ValueError("give either joint_motion or environment, not both")
    rate = 1.0 / plant.dt
    if joint_motion is not None:
        grid = resample_grid([tau_ref, joint_motion], rate)
        theta = np.interp(grid, joint_motion.time, _channel(joint_motion, "angle"))
    else:
        grid = resample_grid([tau_ref], rate)
        theta = np.zeros(grid.size)
    if grid[-1] - grid[0] < 1.0 - 1e-9:
        raise DataError("simulation needs at least 1 s of input")
    ref = np.interp(grid, tau_ref.time, _channel(tau_ref, "tau_ref"))
    k, jm, bm = plant.spring_k, plant.motor_inertia, plant.friction
    h = plant.dt / plant.substeps
    env = environment is not None
    if env:
        e = environment
        a = np.array([[0.0, 1.0, 0.0, 0.0],
                      [-k / jm, -bm / jm, k / jm, 0.0],
                      [0.0, 0.0, 0.0, 1.0],
                      [k / e.inertia, 0.0, -(k + e.stiffness) / e.inertia, -e.damping / e.inertia]])
        b = np.array([[0.0], [1.0 / jm], [0.0], [0.0]])
        jenv, kenv, benv = e.inertia, e.stiffness, e.damping
    else:
        a = np.array([[0.0, 1.0], [-k / jm, -bm / jm]])
        b = np.array([[0.0, 0.0], [1.0 / jm, k / jm]])
        jenv = kenv = benv = 0.0
    P, R = _midpoint_maps(a, b, h)
    (b1, a1), (bq, aq) = ctrl.filters(plant.dt)
    bh, ah = ctrl.damping_filter(plant.dt)
    n = grid.size
    outs = [np.zeros(n) for _ in range(6)]
    bad = _run(ref, theta, env, P, R, k, jm, bm, jenv, kenv, benv, ctrl.kp, ctrl.kd, ctrl.dob, b1, a1, bq, aq, bh, ah,
               plant.torque_limit, plant.speed_limit, plant.dt, plant.substeps,
               DIVERGENCE_FACTOR * plant.torque_limit, *outs)
    if bad >= 0:
        raise DivergenceError(f"spring torque diverged at t={grid[bad]:.4f} s", time=float(grid[bad]))
    exo, dist, tm, angle, energy, work = outs
    return SimResult(grid, ref, exo, dist, angle, tm, energy, work)


def transparency_metric(res):
    """RMS spring torque of a zero-reference run, N*m."""
    if np.any(res.tau_ref != 0.0):
        raise ValueError("transparency is defined for a zero torque reference")
    return float(np.sqrt(np.mean(res.tau_exo ** 2)))


# --- scenario builders -------------------------------------------------------


def sinusoid_reference(duration, freq_hz=1.0, amplitude=20.0, rate=1000.0):
    t = np.arange(int(round(duration * rate)) + 1) / rate
    return Trace(t, {"tau_ref": amplitude * np.sin(2.0 * math.pi * freq_hz * t)})


def step_reference(duration, level=10.0, t_step=0.1, rate=1000.0):
    t = np.arange(int(round(duration * rate)) + 1) / rate
    return Trace(t, {"tau_ref": np.where(t >= t_step, level, 0.0)})


def gait_motion(duration, cadence=1.0, amplitude=0.25, heel_strike=0.5, width=0.01, rate=1000.0):
    """Ankle-like joint motion with heel-strike velocity transients.

    A sinusoidal swing of ``amplitude`` rad at ``cadence`` Hz plus, once per
    stride, a Gaussian bump in angle of standard deviation ``width`` s whose
    velocity peaks at ``heel_strike`` rad/s.
    """
    t = np.arange(int(round(duration * rate)) + 1) / rate
    theta = amplitude * np.sin(2.0 * math.pi * cadence * t)
    # peak slope of A*exp(-x^2/2s^2) is A/s*exp(-1/2)
    bump = heel_strike * width * math.exp(0.5)
    for t_hs in np.arange(0.5 / cadence, duration, 1.0 / cadence):
        theta += bump * np.exp(-0.5 * ((t - t_hs) / width) ** 2)
    return Trace(t, {"angle": theta})


def settling_time(res, level, band=0.02, t_step=0.0):
    """Time after ``t_step`` from which tau_exo stays within ``band`` of ``level``."""
    err = np.abs(res.tau_exo - level) > band * abs(level)
    after = res.time >= t_step
    idx = np.nonzero(err & after)[0]
    if idx.size == 0:
        return 0.0
    last = idx[-1]
    if last == res.time.size - 1:
        return math.inf
    return float(res.time[last + 1] - t_step)
