import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from nmbc.cli import main
from nmbc.model import Trace, load_model, load_trace, write_trace

import oracles

COMMANDS = ["synth", "pretune", "calibrate", "run", "simulate-exo", "analyze", "dump-curves"]


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Exported example model plus one synthesized trial."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--export-model", str(d / "model")]) == 0
    assert main(["synth", "--out", str(d / "data"), "--model", str(d / "model" / "model.json"),
                 "--duration", "4", "--seed", "1"]) == 0
    return d


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["run", "--model", "m.json"])
    assert exc.value.code == 1
    assert "required" in capsys.readouterr().err


def test_console_script_logs_to_stderr(tmp_path):
    env = dict(os.environ, NMBC_LOG="DEBUG")
    out = tmp_path / "curves.csv"
    p = subprocess.run([sys.executable, "-m", "nmbc", "dump-curves", "--out", str(out)], env=env,
                       capture_output=True, text=True)
    assert p.returncode == 0
    assert p.stdout == ""
    assert out.exists()
    p = subprocess.run([sys.executable, "-m", "nmbc", "run", "--model", str(tmp_path / "nope.json"),
                        "--emg", "e.csv", "--angles", "a.csv"], capture_output=True, text=True,
                       env=dict(os.environ, NMBC_LOG="ERROR"))
    assert p.returncode == 2
    assert "ERROR" in p.stderr and p.stdout == ""


def test_synth_outputs(work):
    files = sorted(os.listdir(work / "data"))
    assert files == ["angles.csv", "emg.csv", "manifest.json", "tau_id.csv", "truth.json"]
    manifest = json.loads((work / "data" / "manifest.json").read_text())
    assert manifest["dofs"] == ["ankle_r", "knee_r"]
    tau = load_trace(str(work / "data" / "tau_id.csv"))
    assert tau.names == ("ankle_r", "knee_r")


def test_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / d), "--duration", "2", "--seed", "9", "--noise", "0.01"]) == 0
    for f in ("emg.csv", "angles.csv", "tau_id.csv", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_export_refuses_overwrite(work):
    assert main(["synth", "--export-model", str(work / "model")]) == 2


def test_pretune_identity(work, tmp_path):
    m = str(work / "model" / "model.json")
    report = tmp_path / "pretune.csv"
    assert main(["pretune", "--scaled", m, "--unscaled", m, "--out", str(tmp_path / "pt.json"),
                 "--report", str(report)]) == 0
    rows = read_csv(report)
    assert len(rows) == 4
    assert all(float(r["objective"]) <= 1e-10 and r["converged"] == "1" for r in rows)
    tuned = load_model(str(tmp_path / "pt.json"))
    base = load_model(m)
    for u in base.mtus:
        assert tuned.mtu(u.name).params.l_opt == pytest.approx(u.params.l_opt, rel=1e-4)


def test_calibrate_small_budget(work, tmp_path):
    out = tmp_path / "cal.json"
    hist = tmp_path / "hist.csv"
    rep = tmp_path / "report.json"
    assert main(["calibrate", "--dataset", str(work / "data"), "--model", str(work / "model" / "model.json"),
                 "--out", str(out), "--seed", "2", "--max-evals", "25", "--history", str(hist),
                 "--report", str(rep)]) == 0
    cal = load_model(str(out))
    assert cal.mtu_names == load_model(str(work / "model" / "model.json")).mtu_names
    h = [float(r["best_objective"]) for r in read_csv(hist)]
    assert len(h) <= 25 and all(b <= a for a, b in zip(h, h[1:]))
    doc = json.loads(rep.read_text())
    assert doc["n_evals"] <= 25 and set(doc["rmse"]) == {"ankle_r", "knee_r"}


def test_calibrate_missing_dataset(work, tmp_path):
    assert main(["calibrate", "--dataset", str(tmp_path), "--model", str(work / "model" / "model.json"),
                 "--out", str(tmp_path / "x.json")]) == 2


def test_run_columns_and_support(work, tmp_path):
    out = tmp_path / "tau.csv"
    assert main(["run", "--model", str(work / "model" / "model.json"), "--emg", str(work / "data" / "emg.csv"),
                 "--angles", str(work / "data" / "angles.csv"), "--support-ratio", "0.4", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["time", "ankle_r_tau_bio", "knee_r_tau_bio", "ankle_r_tau_support",
                             "knee_r_tau_support"]
    for r in rows[::97]:
        bio = float(r["ankle_r_tau_bio"])
        assert float(r["ankle_r_tau_support"]) == pytest.approx(min(max(0.4 * bio, -40), 40), abs=1e-9)


def test_run_to_stdout(work, capsys):
    assert main(["run", "--model", str(work / "model" / "model.json"), "--emg", str(work / "data" / "emg.csv"),
                 "--angles", str(work / "data" / "angles.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("time,ankle_r_tau_bio")
    assert len(lines) == 4002


def test_run_channel_mismatch(work, tmp_path):
    emg = load_trace(str(work / "data" / "emg.csv"))
    bad = Trace(emg.time, {("x_" + n): emg[n] for n in emg.names})
    write_trace(bad, str(tmp_path / "emg.csv"))
    assert main(["run", "--model", str(work / "model" / "model.json"), "--emg", str(tmp_path / "emg.csv"),
                 "--angles", str(work / "data" / "angles.csv"), "--out", str(tmp_path / "o.csv")]) == 2


def test_run_bad_support_ratio(work, tmp_path):
    assert main(["run", "--model", str(work / "model" / "model.json"), "--emg", str(work / "data" / "emg.csv"),
                 "--angles", str(work / "data" / "angles.csv"), "--support-ratio", "1.5",
                 "--out", str(tmp_path / "o.csv")]) == 1


def _ref_files(tmp_path, duration=3.0):
    t = np.arange(int(duration * 1000) + 1) / 1000
    write_trace(Trace(t, {"tau_ref": 20 * np.sin(2 * np.pi * t)}), str(tmp_path / "ref.csv"))
    write_trace(Trace(t, {"ankle": 0.25 * np.sin(2 * np.pi * t)}), str(tmp_path / "motion.csv"))


def test_simulate_exo(tmp_path):
    _ref_files(tmp_path)
    out = tmp_path / "sim.csv"
    assert main(["simulate-exo", "--ref", str(tmp_path / "ref.csv"), "--motion", str(tmp_path / "motion.csv"),
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["time", "tau_ref", "tau_exo", "tau_dist", "angle"]
    err = np.array([float(r["tau_exo"]) - float(r["tau_ref"]) for r in rows])
    assert np.sqrt(np.mean(err ** 2)) < 2.0


def test_simulate_exo_errors(tmp_path):
    _ref_files(tmp_path)
    assert main(["simulate-exo", "--ref", str(tmp_path / "ref.csv"), "--ref-column", "nope",
                 "--out", str(tmp_path / "s.csv")]) == 2
    t = np.arange(0, 2.0, 1e-3)
    write_trace(Trace(t, {"angle": np.where(t > 0.5, np.sin(2 * np.pi * 20 * (t - 0.5)), 0.0)}),
                str(tmp_path / "violent.csv"))
    write_trace(Trace(t, {"tau_ref": np.zeros_like(t)}), str(tmp_path / "zero.csv"))
    assert main(["simulate-exo", "--ref", str(tmp_path / "zero.csv"), "--motion", str(tmp_path / "violent.csv"),
                 "--out", str(tmp_path / "s.csv")]) == 3
    assert main(["simulate-exo", "--ref", str(tmp_path / "zero.csv"), "--q-cutoff", "0",
                 "--out", str(tmp_path / "s.csv")]) == 1


def test_analyze_session(work, tmp_path):
    m = str(work / "model" / "model.json")
    conditions = []
    for label, ratio in (("off", 0.0), ("on", 0.5)):
        d = tmp_path / label
        assert main(["synth", "--out", str(d), "--model", m, "--duration", "8", "--seed", "3",
                     "--support-ratio", str(ratio), "--perturb", "0"]) == 0
        assert main(["run", "--model", m, "--emg", str(d / "emg.csv"), "--angles", str(d / "angles.csv"),
                     "--out", str(d / "tau.csv")]) == 0
        conditions.append({"label": label, "files": [f"{label}/angles.csv", f"{label}/tau.csv"]})
    session = {"conditions": conditions, "baseline": "off", "knee": "knee_r",
               "channels": ["ankle_r_tau_bio"]}
    (tmp_path / "session.json").write_text(json.dumps(session))
    out = tmp_path / "report.csv"
    assert main(["analyze", "--session", str(tmp_path), "--out", str(out)]) == 0
    rows = {(r["condition"], r["channel"]): r for r in read_csv(out)}
    assert rows["off", "ankle_r_tau_bio"]["percent_change"] == ""
    assert int(rows["off", "ankle_r_tau_bio"]["n_cycles"]) >= 6
    assert float(rows["on", "ankle_r_tau_bio"]["percent_change"]) < 0


def test_analyze_bad_session(tmp_path):
    assert main(["analyze", "--session", str(tmp_path)]) == 2
    (tmp_path / "session.json").write_text(json.dumps({"conditions": []}))
    assert main(["analyze", "--session", str(tmp_path / "session.json")]) == 2


def test_dump_curves_knots(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["dump-curves", "--out", str(out)]) == 0
    rows = read_csv(out)
    tables = {"active_fl": oracles.ACTIVE, "passive_fl": oracles.PASSIVE, "fv": oracles.FV}
    for name, (xs, ys) in tables.items():
        got = [(float(r["x"]), float(r["y"])) for r in rows if r["curve"] == name]
        assert len(got) == len(xs)
        for (gx, gy), x, y in zip(got, xs, ys):
            assert gx == x and abs(gy - y) <= 1e-9
    tendon = {float(r["x"]): float(r["y"]) for r in rows if r["curve"] == "tendon"}
    assert tendon[0.0] == 0.0 and tendon[0.0254] == pytest.approx(37.5 * 0.0254 - 0.2375)


def test_dump_curves_dense(capsys):
    assert main(["dump-curves", "--samples", "50"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "curve,x,y" and len(lines) == 1 + 4 * 50
