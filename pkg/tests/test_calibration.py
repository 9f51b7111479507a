import json
import math
from dataclasses import replace

import numpy as np
import pytest

from nmbc.calibration import (CalibrationBounds, CalibrationDataset, CalibrationTrial, N_POSES, PretuneSample, calibrate_sa,
                              calibration_objective, informative, load_dataset, poses, predicted_lmt, pretune,
                              pretune_model, pretune_objective, pretune_samples)
from nmbc.errors import DataError
from nmbc.model import MtuParams, Trace
from nmbc.synth import SynthSpec, synth, synth_traces
from nmbc.torque import run_pipeline

import oracles
from helpers import grid_oracle, oracle_strain, scaled_example, toy_model

SOL = MtuParams(-1.2, 3549.0, 0.05, 0.25, 0.436)
TA = MtuParams(-0.8, 905.0, 0.098, 0.223, 0.087)


def toy(sol=SOL, ta=TA):
    l_sol = SOL.l_slack * 1.01 + SOL.l_opt * math.cos(SOL.alpha_opt)
    l_ta = TA.l_slack * 1.01 + TA.l_opt * math.cos(TA.alpha_opt)
    return toy_model({"sol_r": (sol, l_sol, 0.05, "sol_r"), "tibant_r": (ta, l_ta, -0.04, "tibant_r")},
                     joint="ankle_r", mvc={"sol_r": 0.4, "tibant_r": 0.5})


def make_dataset(model, seeds=(1, 2), duration=2.0, offset=0.0):
    trials = []
    for s in seeds:
        emg, ang, _ = synth_traces(model, SynthSpec(duration=duration, seed=s, perturb=0.0))
        tau = run_pipeline(model, emg, ang)
        tau_id = Trace(tau.time, {j: tau[f"{j}_tau_bio"] + offset for j in model.joint_names})
        trials.append(CalibrationTrial(f"t{s}", emg, ang, tau_id))
    return CalibrationDataset(tuple(trials), model.joint_names)


@pytest.fixture(scope="module")
def toy_model_():
    return toy()


@pytest.fixture(scope="module")
def toy_ds(toy_model_):
    return make_dataset(toy_model_)


# --- pre-tuning --------------------------------------------------------------

def test_poses_span_range(right_leg):
    ps = poses(right_leg, "gasmed_r")
    assert len(ps) == N_POSES == 11
    for j in right_leg.joints:
        if j.name in ps[0]:
            vals = [p[j.name] for p in ps]
            assert vals[0] == j.angle_range[0] and vals[-1] == pytest.approx(j.angle_range[1])
            assert np.allclose(np.diff(vals), (j.angle_range[1] - j.angle_range[0]) / 10)


def test_pretune_identity(right_leg):
    for m in right_leg.mtus:
        samples = pretune_samples(right_leg, right_leg, m.name)
        res = pretune(samples, m.params)
        assert res.objective <= 1e-10
        assert res.objective <= res.initial_objective
        assert res.l_opt == pytest.approx(m.params.l_opt, rel=1e-4)
        assert res.l_slack == pytest.approx(m.params.l_slack, rel=1e-4)


def test_pretune_scaled_limb(right_leg):
    scaled = scaled_example("right_leg", 1.1)
    model, results = pretune_model(scaled, right_leg)
    for m in right_leg.mtus:
        r = results[m.name]
        want_lo, want_ls = 1.1 * m.params.l_opt, 1.1 * m.params.l_slack
        assert r.l_opt == pytest.approx(want_lo, rel=0.01)
        assert r.l_slack == pytest.approx(want_ls, rel=0.01)
        assert r.objective <= r.initial_objective
        samples = pretune_samples(scaled, right_leg, m.name)
        g_lo, g_ls, g_obj = grid_oracle(samples, want_lo, want_ls)
        # the exhaustive search lands within 1% too, and never beats the optimizer
        assert g_lo == pytest.approx(want_lo, rel=0.01)
        assert g_ls == pytest.approx(want_ls, rel=0.01)
        assert r.objective <= g_obj
        assert model.mtu(m.name).params.l_opt == r.l_opt


def test_pretune_objective_definition(right_leg):
    samples = pretune_samples(right_leg, right_leg, "sol_r")
    used = informative(samples)
    p = right_leg.mtu("sol_r").params
    manual = 0.0
    for s in used:
        ca = math.cos(s.alpha)
        pred = p.l_slack * 1.02 * (1 + oracle_strain(s.fnorm_max * ca)) + p.l_opt * s.lnorm_unscaled * ca
        manual += (s.lmt_scaled - pred) ** 2
    assert pretune_objective(samples, p.l_opt, p.l_slack * 1.02) == pytest.approx(manual, rel=1e-9)


def test_predicted_length_continuous_at_strain_cutoff():
    cut = oracles.tendon(0.0127)
    below = predicted_lmt([PretuneSample(1, {}, 0.3, 1.0, cut * (1 - 1e-12), 0.0)], 0.05, 0.25)[0]
    above = predicted_lmt([PretuneSample(1, {}, 0.3, 1.0, cut * (1 + 1e-12), 0.0)], 0.05, 0.25)[0]
    assert abs(below - above) <= 1e-4


def test_pretune_needs_eleven_samples(right_leg):
    samples = pretune_samples(right_leg, right_leg, "sol_r")
    with pytest.raises(ValueError):
        pretune(samples[:5], right_leg.mtu("sol_r").params)


def test_pretune_rejects_all_slack():
    p = MtuParams(-1, 1000, 0.05, 0.25, 0.1)
    model = toy_model({"m_r": (p, 0.25 * 0.98, 0.005, "m_r")}, joint="ankle_r")
    with pytest.raises(DataError):
        pretune(pretune_samples(model, model, "m_r"), p)


# --- objective ---------------------------------------------------------------

def test_objective_zero_on_self_generated(toy_model_, toy_ds):
    assert calibration_objective(toy_model_.params(), toy_ds, toy_model_) <= 1e-20


def test_objective_constant_offset(toy_model_):
    ds = make_dataset(toy_model_, offset=1.0)
    assert calibration_objective(toy_model_.params(), ds, toy_model_) == pytest.approx(1.0, abs=1e-12)


def test_objective_triple_sum_oracle(toy_model_):
    rng = np.random.default_rng(5)
    trials = []
    for s in (3, 4):
        emg, ang, _ = synth_traces(toy_model_, SynthSpec(duration=1.5, seed=s, perturb=0.0))
        tau_id = Trace(ang.time, {"ankle_r": rng.normal(0, 30, len(ang))})
        trials.append(CalibrationTrial(f"t{s}", emg, ang, tau_id))
    ds = CalibrationDataset(tuple(trials), ("ankle_r",))
    params = {"sol_r": replace(SOL, shape_factor=-2.0), "tibant_r": replace(TA, f_max_iso=700.0)}
    got = calibration_objective(params, ds, toy_model_)
    trial_model = toy_model_.with_params(params)
    total, n_rows = 0.0, None
    for tr in trials:
        pred = run_pipeline(trial_model, tr.emg, tr.angles)["ankle_r_tau_bio"]
        n_rows = len(pred)
        for r in range(n_rows):
            total += (pred[r] - tr.tau_id["ankle_r"][r]) ** 2
    assert got == pytest.approx(total / (n_rows * len(trials) * 1), rel=1e-12)


def test_objective_trial_permutation(toy_model_, toy_ds):
    params = {"sol_r": replace(SOL, l_opt=0.051), "tibant_r": TA}
    swapped = CalibrationDataset(toy_ds.trials[::-1], toy_ds.dof_names)
    a = calibration_objective(params, toy_ds, toy_model_)
    b = calibration_objective(params, swapped, toy_model_)
    assert a > 0
    assert abs(a - b) <= 1e-12 * max(1.0, a)


def test_objective_unknown_dof(toy_model_, toy_ds):
    bad = CalibrationTrial("x", toy_ds.trials[0].emg, toy_ds.trials[0].angles,
                           Trace(toy_ds.trials[0].tau_id.time, {"knee_r": toy_ds.trials[0].tau_id["ankle_r"]}))
    with pytest.raises(DataError):
        calibration_objective(toy_model_.params(), CalibrationDataset((bad,), ("knee_r",)), toy_model_)


def test_dataset_validation(toy_ds):
    with pytest.raises(DataError):
        CalibrationDataset((), ("ankle_r",))
    with pytest.raises(DataError):
        CalibrationDataset(toy_ds.trials, ("hip_r",))


def test_objective_names_failing_row(toy_model_, toy_ds):
    # a slack length so long that the geometry falls below the sanity bound
    params = {"sol_r": replace(SOL, l_slack=0.5), "tibant_r": TA}
    with pytest.raises(DataError, match=r"trial 't1', row \d+"):
        calibration_objective(params, toy_ds, toy_model_)


# --- annealing ---------------------------------------------------------------

@pytest.fixture(scope="module")
def perturbed():
    truth = toy()
    start = toy(replace(SOL, shape_factor=-2.0, f_max_iso=SOL.f_max_iso * 0.8),
                replace(TA, shape_factor=-0.3, f_max_iso=TA.f_max_iso * 1.2))
    return truth, start, make_dataset(truth)


@pytest.fixture(scope="module")
def sa_run(perturbed):
    _, start, ds = perturbed
    return calibrate_sa(ds, start, seed=3, max_evals=400)


def test_sa_improves_and_respects_bounds(perturbed, sa_run):
    _, start, _ = perturbed
    res = sa_run
    assert res.objective < 0.2 * res.initial_objective
    bounds = CalibrationBounds(start.params())
    for name, p in res.params.items():
        assert bounds.contains(name, p)
        assert -3.0 <= p.shape_factor <= -1e-3
        nom = start.mtu(name).params
        assert 0.5 <= p.f_max_iso / nom.f_max_iso <= 1.5
        assert abs(p.l_opt / nom.l_opt - 1) <= 0.025 + 1e-12
        assert abs(p.l_slack / nom.l_slack - 1) <= 0.05 + 1e-12


def test_sa_history_non_increasing(sa_run):
    h = np.array(sa_run.history)
    assert h[0] == sa_run.initial_objective
    assert np.all(np.diff(h) <= 0)
    assert h[-1] == sa_run.objective
    assert sa_run.n_evals <= 400


def test_sa_result_objective_is_consistent(perturbed, sa_run):
    _, start, ds = perturbed
    assert calibration_objective(sa_run.params, ds, start) == pytest.approx(sa_run.objective, rel=1e-9)
    rmse = math.sqrt(sa_run.objective)
    assert sa_run.rmse["ankle_r"] == pytest.approx(rmse, rel=1e-9)


def test_sa_deterministic(perturbed, sa_run):
    _, start, ds = perturbed
    again = calibrate_sa(ds, start, seed=3, max_evals=400)
    assert again.params == sa_run.params
    assert again.history == sa_run.history
    other = calibrate_sa(ds, start, seed=4, max_evals=400)
    assert other.history != sa_run.history


def test_sa_never_worse_than_start(toy_model_, toy_ds):
    res = calibrate_sa(toy_ds, toy_model_, seed=0, max_evals=60)
    assert res.objective == res.initial_objective <= 1e-20
    assert res.params == toy_model_.params()


def test_sa_stops_when_stalled(toy_model_):
    ds = make_dataset(toy_model_, seeds=(1,), duration=1.0)
    res = calibrate_sa(ds, toy_model_, seed=0, max_evals=5000, cycles=2)
    assert res.converged
    assert res.n_evals < 5000


def test_summary_is_json_ready(sa_run):
    doc = json.loads(json.dumps(sa_run.summary()))
    assert set(doc["params"]) == {"sol_r", "tibant_r"}


# --- dataset files -----------------------------------------------------------

def test_load_dataset_roundtrip(tmp_path, right_leg):
    synth(right_leg, SynthSpec(duration=1.0, seed=1), str(tmp_path), prefix="a_")
    synth(right_leg, SynthSpec(duration=1.0, seed=2, truth_seed=1), str(tmp_path), prefix="b_")
    ds = load_dataset(str(tmp_path))
    assert [t.name for t in ds.trials] == ["a", "b"]
    assert ds.dof_names == tuple(right_leg.joint_names)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(str(tmp_path))
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError, match="manifest.json:1"):
        load_dataset(str(tmp_path))
    (tmp_path / "manifest.json").write_text(json.dumps({"dofs": ["ankle_r"], "trials": [{"emg": "e.csv"}]}))
    with pytest.raises(DataError):
        load_dataset(str(tmp_path))
