import json

import numpy as np
import pytest

from nmbc.calibration import load_dataset
from nmbc.gait import segment
from nmbc.model import load_model, load_trace
from nmbc.synth import (ANKLE_RANGE, KNEE_RANGE, SynthSpec, build_example_model, gait_angles, synth,
                        synth_traces, truth_params)
from nmbc.torque import AssistanceConfig, run_pipeline


def test_seed_determinism(right_leg):
    a = synth_traces(right_leg, SynthSpec(duration=2.0, seed=5, noise=0.02))
    b = synth_traces(right_leg, SynthSpec(duration=2.0, seed=5, noise=0.02))
    c = synth_traces(right_leg, SynthSpec(duration=2.0, seed=6, noise=0.02))
    for x, y in zip(a[:2], b[:2]):
        for n in x.names:
            assert np.array_equal(x[n], y[n])
    assert not np.array_equal(a[0]["sol_r"], c[0]["sol_r"])
    assert a[2].params() == b[2].params()


def test_truth_seed_decouples_noise_from_truth(right_leg):
    a = synth_traces(right_leg, SynthSpec(duration=1.0, seed=1, truth_seed=42))[2]
    b = synth_traces(right_leg, SynthSpec(duration=1.0, seed=2, truth_seed=42))[2]
    assert a.params() == b.params()


@pytest.mark.parametrize("cadence,expected", [(1.0, (9, 10)), (0.8, (7, 8))])
def test_cadence_sets_cycle_count(right_leg, cadence, expected):
    _, angles, _ = synth_traces(right_leg, SynthSpec(duration=10.0, cadence=cadence))
    n = len(segment(angles["knee_r"], angles.time, 0.5 / cadence))
    assert expected[0] <= n <= expected[1]


def test_angles_within_joint_ranges():
    t = np.linspace(0, 1, 1001)
    a, k = gait_angles(t, 1.0)
    assert ANKLE_RANGE[0] < a.min() and a.max() < ANKLE_RANGE[1]
    assert KNEE_RANGE[0] < k.min() and k.max() < KNEE_RANGE[1]
    # periodic in the stride phase
    a2, k2 = gait_angles(t + 1.0, 1.0)
    assert np.allclose(a, a2) and np.allclose(k, k2)


def test_emg_bounded_by_mvc(right_leg):
    emg, _, _ = synth_traces(right_leg, SynthSpec(duration=3.0, speed=2.0))
    for ch in emg.names:
        assert emg[ch].min() >= 0.0 and emg[ch].max() <= right_leg.mvc[ch] + 1e-12


def test_support_ratio_lowers_drive(right_leg):
    off, _, _ = synth_traces(right_leg, SynthSpec(duration=3.0, perturb=0.0))
    on, _, _ = synth_traces(right_leg, SynthSpec(duration=3.0, perturb=0.0, support_ratio=0.5))
    # same seed, same jitter: only the gain differs, 1 / 1.5 away from saturation
    assert np.allclose(on["sol_r"], off["sol_r"] / 1.5)


def test_truth_params_inside_boxes(right_leg):
    rng = np.random.default_rng(0)
    for _ in range(20):
        truth = truth_params(right_leg, rng)
        for m in right_leg.mtus:
            p, q = m.params, truth[m.name]
            assert -3.0 <= q.shape_factor < 0.0
            assert 0.8 * p.f_max_iso <= q.f_max_iso <= 1.2 * p.f_max_iso
            assert abs(q.l_opt / p.l_opt - 1) <= 0.015 + 1e-12
            assert abs(q.l_slack / p.l_slack - 1) <= 0.03 + 1e-12


def test_zero_noise_self_consistency(right_leg, tmp_path):
    spec = SynthSpec(duration=2.0, seed=3)
    synth(right_leg, spec, str(tmp_path))
    truth = load_model(str(tmp_path / "truth.json"))
    emg = load_trace(str(tmp_path / "emg.csv"))
    ang = load_trace(str(tmp_path / "angles.csv"))
    tau = load_trace(str(tmp_path / "tau_id.csv"))
    # running the saved truth model on the saved traces reproduces tau_id
    out = run_pipeline(truth, emg, ang, AssistanceConfig(0.0))
    for j in ("ankle_r", "knee_r"):
        assert np.max(np.abs(out[f"{j}_tau_bio"] - tau[j])) <= 1e-6
    assert np.max(np.abs(tau["ankle_r"])) > 10.0


def test_manifest_accumulates_trials(right_leg, tmp_path):
    synth(right_leg, SynthSpec(duration=1.0, seed=1), str(tmp_path), prefix="a_")
    synth(right_leg, SynthSpec(duration=1.0, seed=2), str(tmp_path), prefix="b_")
    synth(right_leg, SynthSpec(duration=1.0, seed=2), str(tmp_path), prefix="b_")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert [t["name"] for t in manifest["trials"]] == ["a", "b"]
    ds = load_dataset(str(tmp_path))
    assert len(ds.trials) == 2


def test_build_example_model_roundtrip(tmp_path, bilateral):
    build_example_model(str(tmp_path / "m"))
    m = load_model(str(tmp_path / "m" / "model.json"))
    assert m.mtu_names == bilateral.mtu_names
    assert len(m.mtus) == 14


@pytest.mark.parametrize("kw", [{"duration": 0}, {"cadence": -1}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)
