"""Model personalization: length pre-tuning and simulated-annealing refinement.

Pre-tuning fits each unit's optimal fiber length and tendon slack length so
that lengths predicted from an unscaled model's fiber state match the
lengths of a scaled geometry model. Refinement then adjusts shape factor,
force scale, optimal fiber length and slack length of every unit, inside
fixed boxes, to match measured joint torques.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceError, DataError
from .model import load_trace
from .muscle import DEFAULT_REL_TOL, solve_equilibrium, tendon_strain_from_force
from .muscle import force_trace
from .torque import SAMPLE_RATE_HZ, prepare_inputs

log = logging.getLogger(__name__)

N_POSES = 11
SLACK_FORCE = 10 * DEFAULT_REL_TOL  # normalized

E_BOUNDS = (-3.0, -1e-3)
F_SCALE_BOUNDS = (0.5, 1.5)
L_OPT_REL = 0.025
L_SLACK_REL = 0.05

# annealing schedule
CYCLES_PER_TEMP = 20
COOLING = 0.85
STOP_EPS = 1e-6
STOP_WINDOW = 4
MAX_EVALS = 100_000
T0_FRACTION = 0.1  # initial temperature relative to the starting objective


# --- pre-tuning --------------------------------------------------------------


@dataclass(frozen=True)
class PretuneSample:
    pose_index: int
    angles: dict
    lmt_scaled: float
    lnorm_unscaled: float
    fnorm_max: float
    alpha: float


@dataclass(frozen=True)
class PretuneResult:
    l_opt: float
    l_slack: float
    objective: float
    initial_objective: float
    converged: bool


def poses(model, mtu_name, n=N_POSES):
    """``n`` poses sweeping every spanned joint across its range at once."""
    m = model.mtu(mtu_name)
    ranges = {j.name: j.angle_range for j in model.joints}
    frac = np.linspace(0.0, 1.0, n)
    return [{j: ranges[j][0] + f * (ranges[j][1] - ranges[j][0]) for j in m.spanned_joints} for f in frac]


def pretune_samples(scaled, unscaled, mtu_name, curves=None):
    """Build the 11 samples for one unit.

    Fiber state comes from the unscaled model at full activation and zero
    velocity; target lengths come from the scaled model's geometry.
    """
    p = unscaled.mtu(mtu_name).params
    s_un = unscaled.geometry[mtu_name]
    s_sc = scaled.geometry[mtu_name]
    out = []
    for i, pose in enumerate(poses(unscaled, mtu_name), start=1):
        l_un = s_un.evaluate([pose[d] for d in s_un.dofs])[0]
        l_sc = s_sc.evaluate([pose[d] for d in s_sc.dofs])[0]
        st = solve_equilibrium(l_un, 0.0, 1.0, p, curves)
        out.append(PretuneSample(i, pose, float(l_sc), st.fiber_length / p.l_opt,
                                 st.f_fiber / p.f_max_iso, st.pennation))
    return out


def predicted_lmt(samples, l_opt, l_slack):
    """L_slack * (1 + strain) + L_opt * lnorm * cos(alpha) per sample; strain
    is read off the tendon curve at the fiber force projected on the tendon."""
    out = np.empty(len(samples))
    for k, s in enumerate(samples):
        ca = math.cos(s.alpha)
        eps = tendon_strain_from_force(s.fnorm_max * ca)
        out[k] = l_slack * (1.0 + eps) + l_opt * s.lnorm_unscaled * ca
    return out


def informative(samples):
    """Samples with a loaded tendon. With a slack tendon and zero fiber force
    the equilibrium fiber length is arbitrary, so such poses carry no
    information about the lengths and are left out of the fit. Forces within
    ten solver tolerances of zero count as slack."""
    return [s for s in samples if s.fnorm_max * math.cos(s.alpha) > SLACK_FORCE]


def pretune_objective(samples, l_opt, l_slack):
    """Sum of squared length errors over the informative samples, m^2."""
    used = informative(samples)
    target = np.array([s.lmt_scaled for s in used])
    r = target - predicted_lmt(used, l_opt, l_slack)
    return float(r @ r)


def pretune(samples, init):
    """Least-squares (l_opt, l_slack) for one unit by bounded Nelder-Mead.

    ``init`` is the unscaled MtuParams and provides the starting point.
    """
    if len(samples) != N_POSES:
        raise ValueError(f"pretune needs {N_POSES} samples, got {len(samples)}")
    if len(informative(samples)) < 2:
        raise DataError("pretune needs at least two poses with a loaded tendon")
    x0 = np.array([init.l_opt, init.l_slack])
    # optimize on a unit scale so the simplex tolerances are relative
    f = lambda z: pretune_objective(samples, z[0] * x0[0], z[1] * x0[1])  # noqa: E731
    f0 = f(np.ones(2))
    res = minimize(f, np.ones(2), method="Nelder-Mead", bounds=[(0.2, 5.0), (0.2, 5.0)],
                   options={"xatol": 1e-12, "fatol": 1e-20, "maxiter": 4000})
    z = res.x if res.fun <= f0 else np.ones(2)
    if not res.success:
        log.warning("pretune did not converge: %s", res.message)
    return PretuneResult(float(z[0] * x0[0]), float(z[1] * x0[1]), float(min(res.fun, f0)), f0, bool(res.success))


def pretune_model(scaled, unscaled, curves=None):
    """Model with the scaled geometry and pre-tuned lengths for every unit.

    Returns (model, {mtu: PretuneResult}).
    """
    params, results = {}, {}
    for m in scaled.mtus:
        p_un = unscaled.mtu(m.name).params
        res = pretune(pretune_samples(scaled, unscaled, m.name, curves), p_un)
        results[m.name] = res
        params[m.name] = replace(p_un, l_opt=res.l_opt, l_slack=res.l_slack)
    return scaled.with_params(params), results


# --- calibration dataset and objective ---------------------------------------


@dataclass(frozen=True, eq=False)
class CalibrationTrial:
    name: str
    emg: object
    angles: object
    tau_id: object


@dataclass(frozen=True, eq=False)
class CalibrationDataset:
    trials: tuple
    dof_names: tuple
    emg_mode: str = "envelope"

    def __post_init__(self):
        if not self.trials:
            raise DataError("calibration dataset has no trials")
        if not self.dof_names:
            raise DataError("calibration dataset has no DOFs")
        for tr in self.trials:
            missing = [d for d in self.dof_names if d not in tr.tau_id.channels]
            if missing:
                raise DataError(f"trial {tr.name!r}: torque file lacks DOFs {missing}")
            if len(tr.tau_id) < 1:
                raise DataError(f"trial {tr.name!r}: empty torque file")


def load_dataset(path):
    """Read a dataset directory: ``manifest.json`` plus per-trial CSVs.

    The manifest holds ``dofs`` (list of joint names), an optional
    ``emg_mode`` (``envelope`` or ``raw``) and ``trials``, each with
    ``name``, ``emg``, ``angles`` and ``tau_id`` file names.
    """
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"{mpath}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{mpath}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        dofs = tuple(doc["dofs"])
        entries = doc["trials"]
    except (KeyError, TypeError):
        raise DataError(f"{mpath}: manifest needs 'dofs' and 'trials'") from None
    trials = []
    for k, e in enumerate(entries):
        try:
            name = e.get("name", f"trial{k}")
            files = [os.path.join(path, e[key]) for key in ("emg", "angles", "tau_id")]
        except (KeyError, AttributeError):
            raise DataError(f"{mpath}: trial {k} needs 'emg', 'angles' and 'tau_id'") from None
        trials.append(CalibrationTrial(name, load_trace(files[0]), load_trace(files[1]),
                                       load_trace(files[2], expected_channels=dofs)))
    return CalibrationDataset(tuple(trials), dofs, doc.get("emg_mode", "envelope"))


class _Prepared:
    """Per-trial inputs resampled once, with per-unit lengths and arms."""

    def __init__(self, model, ds, rate=SAMPLE_RATE_HZ):
        missing = [d for d in ds.dof_names if d not in model.joint_names]
        if missing:
            raise DataError(f"dataset DOFs {missing} are not joints of the model")
        self.model = model
        self.dofs = ds.dof_names
        self.dt = 1.0 / rate
        self.trials = []
        for tr in ds.trials:
            grid, u, q = prepare_inputs(model, tr.emg, tr.angles, ds.emg_mode, rate)
            target = np.column_stack([np.interp(grid, tr.tau_id.time, tr.tau_id[d]) for d in self.dofs])
            units = {}
            for m in model.mtus:
                s = model.geometry[m.name]
                lmt, grads = s.evaluate_many(np.column_stack([q[d] for d in s.dofs]))
                cols = [(self.dofs.index(d), grads[:, i]) for i, d in enumerate(s.dofs) if d in self.dofs]
                exc = u[m.emg_channel] if m.emg_channel is not None else None
                units[m.name] = (lmt, exc, cols)
            self.trials.append((tr.name, grid, target, units))
        self.count = sum(t[2].size for t in self.trials)

    def contribution(self, k, name, p):
        """Torque of one unit on the dataset DOFs for trial ``k``."""
        tname, grid, target, units = self.trials[k]
        lmt, exc, cols = units[name]
        if np.any(lmt <= 0.95 * p.l_slack):
            i = int(np.argmax(lmt <= 0.95 * p.l_slack))
            raise DataError(f"trial {tname!r}, row {i}: {name} length below 0.95*l_slack")
        if exc is None:
            act = np.zeros_like(lmt)
        else:
            act = np.expm1(p.shape_factor * exc) / math.expm1(p.shape_factor)
        try:
            f, _ = force_trace(p, lmt, act, self.dt)
        except ConvergenceError as exc_:
            raise ConvergenceError(f"trial {tname!r}, row {exc_.index}: {name} equilibrium failed",
                                   index=exc_.index) from None
        out = np.zeros_like(target)
        for j, g in cols:
            out[:, j] -= f * g
        return out

    def sse(self, contribs):
        """Sum of squared errors given {(trial, mtu): contribution}."""
        total = 0.0
        for k, (_, _, target, _) in enumerate(self.trials):
            pred = np.zeros_like(target)
            for m in self.model.mtus:
                pred += contribs[k, m.name]
            r = pred - target
            total += float(np.sum(r * r))
        return total

    def per_dof_rmse(self, contribs):
        sq = np.zeros(len(self.dofs))
        n = 0
        for k, (_, _, target, _) in enumerate(self.trials):
            pred = sum(contribs[k, m.name] for m in self.model.mtus)
            sq += np.sum((pred - target) ** 2, axis=0)
            n += target.shape[0]
        return dict(zip(self.dofs, np.sqrt(sq / n).tolist()))


def calibration_objective(params, ds, model):
    """Mean squared torque error over every (trial, row, DOF) entry, N*m^2.

    ``params`` maps MTU name to MtuParams; units not listed keep the model's
    values. Predictions use the same ingestion and solver as the streaming
    pipeline.
    """
    model = model.with_params(params)
    prep = _Prepared(model, ds)
    contribs = {(k, m.name): prep.contribution(k, m.name, m.params)
                for k in range(len(prep.trials)) for m in model.mtus}
    return prep.sse(contribs) / prep.count


# --- simulated annealing -----------------------------------------------------


@dataclass(frozen=True)
class CalibrationBounds:
    """Boxes around the pre-tuned model (``nominal``)."""

    nominal: dict
    e_bounds: tuple = E_BOUNDS
    f_scale: tuple = F_SCALE_BOUNDS
    l_opt_rel: float = L_OPT_REL
    l_slack_rel: float = L_SLACK_REL

    def box(self, name):
        """(lower, upper) for [E, F_scale, l_opt, l_slack]."""
        p = self.nominal[name]
        lo = np.array([self.e_bounds[0], self.f_scale[0], p.l_opt * (1 - self.l_opt_rel),
                       p.l_slack * (1 - self.l_slack_rel)])
        hi = np.array([self.e_bounds[1], self.f_scale[1], p.l_opt * (1 + self.l_opt_rel),
                       p.l_slack * (1 + self.l_slack_rel)])
        return lo, hi

    def contains(self, name, p, rtol=1e-12):
        lo, hi = self.box(name)
        x = np.array([p.shape_factor, p.f_max_iso / self.nominal[name].f_max_iso, p.l_opt, p.l_slack])
        slack = rtol * np.maximum(np.abs(lo), np.abs(hi))
        return bool(np.all(x >= lo - slack) and np.all(x <= hi + slack))


@dataclass(eq=False)
class CalibrationResult:
    params: dict
    history: list = field(repr=False)
    objective: float = math.nan
    initial_objective: float = math.nan
    rmse: dict = field(default_factory=dict)
    n_evals: int = 0
    converged: bool = False

    def summary(self):
        return {
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "rmse": self.rmse,
            "n_evals": self.n_evals,
            "converged": self.converged,
            "params": {k: v.to_dict() for k, v in self.params.items()},
        }


def _to_params(nominal, x):
    return replace(nominal, shape_factor=float(x[0]), f_max_iso=float(nominal.f_max_iso * x[1]),
                   l_opt=float(x[2]), l_slack=float(x[3]))


def calibrate_sa(ds, model, seed=0, bounds=None, max_evals=MAX_EVALS, t0=None, eps=STOP_EPS,
                 cycles=CYCLES_PER_TEMP, cooling=COOLING):
    """Box-constrained simulated annealing over every unit's parameters.

    Corana-style: each temperature runs ``cycles`` sweeps over the
    coordinates, then step lengths adapt toward a 40-60% acceptance ratio
    and the temperature drops by ``cooling``. Each temperature restarts from
    the best point. The initial temperature defaults to a tenth of the
    starting objective. Stops when the best objective improves by less than
    ``eps`` (relative, floored at 1) over four temperatures, or after
    ``max_evals`` evaluations.
    """
    nominal = model.params()
    bounds = bounds or CalibrationBounds(nominal)
    rng = np.random.default_rng(seed)
    prep = _Prepared(model, ds)
    names = [m.name for m in model.mtus]
    wired = {m.name: m.emg_channel is not None for m in model.mtus}
    lo = {n: bounds.box(n)[0] for n in names}
    hi = {n: bounds.box(n)[1] for n in names}
    x = {}
    for n in names:
        p = nominal[n]
        x[n] = np.clip(np.array([p.shape_factor, p.f_max_iso / bounds.nominal[n].f_max_iso, p.l_opt, p.l_slack]),
                       lo[n], hi[n])
    # coordinates: (mtu, index); the shape factor of a unit without EMG is inert
    coords = [(n, i) for n in names for i in range(4) if i > 0 or wired[n]]
    step = {c: 0.5 * (hi[c[0]][c[1]] - lo[c[0]][c[1]]) for c in coords}

    def unit_params(n, xn):
        return _to_params(bounds.nominal[n], xn)

    contribs = {}
    for n in names:
        for k in range(len(prep.trials)):
            contribs[k, n] = prep.contribution(k, n, unit_params(n, x[n]))
    f = prep.sse(contribs) / prep.count
    f_init = f
    best_x = {n: v.copy() for n, v in x.items()}
    best_f = f
    best_contribs = dict(contribs)
    history = [best_f]
    temp = t0 if t0 is not None else max(T0_FRACTION * f, 1e-12)
    n_evals = 1
    accepted = {c: 0 for c in coords}
    converged = False
    best_per_temp = [best_f]
    while n_evals < max_evals:
        for _ in range(cycles):
            for c in coords:
                if n_evals >= max_evals:
                    break
                n, i = c
                trial = x[n].copy()
                trial[i] = x[n][i] + step[c] * rng.uniform(-1.0, 1.0)
                if trial[i] < lo[n][i] or trial[i] > hi[n][i]:
                    trial[i] = rng.uniform(lo[n][i], hi[n][i])
                try:
                    new = [prep.contribution(k, n, unit_params(n, trial)) for k in range(len(prep.trials))]
                except (ConvergenceError, DataError) as exc:
                    log.debug("rejecting candidate: %s", exc)
                    n_evals += 1
                    continue
                cand = dict(contribs)
                for k, v in enumerate(new):
                    cand[k, n] = v
                fc = prep.sse(cand) / prep.count
                n_evals += 1
                if fc <= f or rng.uniform() < math.exp(-(fc - f) / temp):
                    x[n] = trial
                    contribs = cand
                    f = fc
                    accepted[c] += 1
                    if fc < best_f:
                        best_f = fc
                        best_x = {m: v.copy() for m, v in x.items()}
                        best_contribs = dict(contribs)
                history.append(best_f)
        # step adjustment (Corana, c = 2)
        for c in coords:
            ratio = accepted[c] / cycles
            width = hi[c[0]][c[1]] - lo[c[0]][c[1]]
            if ratio > 0.6:
                step[c] *= 1.0 + 2.0 * (ratio - 0.6) / 0.4
            elif ratio < 0.4:
                step[c] /= 1.0 + 2.0 * (0.4 - ratio) / 0.4
            step[c] = min(step[c], width)
            accepted[c] = 0
        best_per_temp.append(best_f)
        log.info("T=%.4g best=%.6g evals=%d", temp, best_f, n_evals)
        if len(best_per_temp) > STOP_WINDOW:
            ref = best_per_temp[-1 - STOP_WINDOW]
            if ref - best_f <= eps * max(1.0, abs(best_f)) and f - best_f <= eps * max(1.0, abs(best_f)):
                converged = True
                break
        temp *= cooling
        x = {m: v.copy() for m, v in best_x.items()}
        contribs = dict(best_contribs)
        f = best_f
    if not converged:
        log.warning("annealing stopped on the evaluation budget (%d)", n_evals)
    params = {n: unit_params(n, best_x[n]) for n in names}
    return CalibrationResult(params, history, best_f, f_init, prep.per_dof_rmse(best_contribs), n_evals, converged)
