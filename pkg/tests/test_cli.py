import csv
import hashlib
import json

import numpy as np
import pytest

from socialmpc.cli import main
from socialmpc.core import load_frames
from socialmpc.sim import EpisodeLog

SMALL = """
T_h = 10
N = 50
d_model = 8
n_heads = 2
k_modes = 2
batch_size = 8
seed = 4
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.toml"
    cfg.write_text(SMALL)
    scn = root / "scn.toml"
    scn.write_text("vc_ratio = 0.6\nhorizon_s = 30.0\n")
    data = root / "frames.jsonl"
    assert main(["gen-data", "--config", str(cfg), "--scenario", str(scn), "--episodes", "2",
                 "--out", str(data)]) == 0
    return root, cfg, scn, data


def test_gen_data_prints_config_and_is_deterministic(small, tmp_path, capsys):
    root, cfg, scn, data = small
    again = tmp_path / "again.jsonl"
    assert main(["gen-data", "--config", str(cfg), "--scenario", str(scn), "--episodes", "2",
                 "--out", str(again)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# seed = 4")
    assert "d_model = 8" in out and "wrote" in out
    assert sha(again) == sha(data)
    assert data.stat().st_size > 0
    assert (tmp_path / "run_meta.json").exists()


def test_missing_scenario_exit_two(tmp_path, capsys):
    missing = tmp_path / "nope.toml"
    assert main(["gen-data", "--scenario", str(missing), "--out", str(tmp_path / "x.jsonl")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_flags_exit_two(capsys):
    assert main(["simulate", "--planner", "teleport"]) == 2
    assert main([]) == 2


def test_bad_config_exit_two(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("dt = -1.0\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x.jsonl")]) == 2


def test_train_report_and_lr_zero(small, tmp_path):
    _, cfg, _, data = small
    out = tmp_path / "t"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--steps", "3", "--lr", "0",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "train_report.csv")))
    assert len(rows) == 3
    assert (out / "model.ckpt").exists()


def test_predict_untrained_matches_constant_speed(small, tmp_path):
    _, cfg, _, data = small
    out = tmp_path / "p"
    assert main(["predict", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    with open(out / "prediction_errors.csv") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = {r[0]: r[1:] for r in reader}
    assert header == ["method", "ADE@1s", "ADE@2s", "ADE@3s", "ADE@4s", "ADE@5s", "FDE"]
    assert set(rows) == {"model", "constant_velocity"}
    # the zero-interaction model is the small-angle kinematic rollout at constant speed
    frames = {f.frame_id: f for f in load_frames(data, 10, 50)}
    t = np.arange(1, 51) * 0.1
    n = 0
    for line in open(out / "predictions.jsonl"):
        rec = json.loads(line)
        f = frames[rec["frame_id"]]
        for j, pos in rec["positions"].items():
            s, y, v, _, psi = f.history[int(j), -1]
            s -= f.history[0, -1, 0]  # positions are relative to the ego
            expect = np.stack([s + v * t, y + v * psi * t], axis=-1)
            assert np.abs(np.array(pos) - expect).max() < 1e-5
            n += 1
    assert n > 0
    assert float(rows["model"][0]) == pytest.approx(float(rows["constant_velocity"][0]), rel=0.05)
    js = json.loads((out / "prediction_errors.json").read_text())
    assert js["model"]["FDE"] == float(rows["model"][-1])


def test_plan_on_stored_frame(small, tmp_path):
    _, cfg, _, data = small
    out = tmp_path / "plan"
    code = main(["plan", "--config", str(cfg), "--data", str(data), "--frame", "0", "--out", str(out)])
    assert code in (0, 1)
    rec = json.loads((out / "plan.json").read_text())
    assert "status" in rec
    assert main(["plan", "--config", str(cfg), "--data", str(data), "--frame", "100000",
                 "--out", str(out)]) == 2


def test_simulate_evaluate_pipeline(tmp_path, capsys):
    sim = tmp_path / "sim"
    for planner in ("pas",):
        assert main(["simulate", "--planner", planner, "--vc", "0.4", "--episodes", "3",
                     "--out", str(sim)]) == 0
    first = {p.name: sha(p) for p in sim.glob("*.jsonl")}
    assert main(["simulate", "--planner", "pas", "--vc", "0.4", "--episodes", "3", "--out", str(sim)]) == 0
    assert {p.name: sha(p) for p in sim.glob("*.jsonl")} == first
    index = json.loads((sim / "pas_index.json").read_text())
    ev = tmp_path / "ev"
    assert main(["evaluate", str(sim), "--json", "--csv", "--out", str(ev)]) == 0
    rep = json.loads((ev / "eval_pas.json").read_text())
    n_success = sum(e["outcome"] == "success" for e in index)
    assert rep["n_episodes"] == 3
    assert rep["success_pct"] == pytest.approx(100.0 * n_success / 3)
    with open(ev / "eval_pas_outcomes.csv") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["success_pct"]) == rep["success_pct"]


def test_evaluate_paired_table(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--planner", "pas", "--vc", "0.4", "--episodes", "2", "--out", str(sim)]) == 0
    # relabel copies as a second planner to exercise the pairing logic
    for p in sorted(sim.glob("pas_ep*.jsonl")):
        lg = EpisodeLog.read(p)
        lg.planner = "other"
        lg.write(sim / p.name.replace("pas_", "other_"))
    ev = tmp_path / "ev"
    assert main(["evaluate", str(sim), "--out", str(ev)]) == 0
    rows = json.loads((ev / "paired_outcomes.json").read_text())
    assert len(rows) == 2 and all(r["pas"] == r["other"] for r in rows)
    assert (ev / "paired_outcomes.csv").exists()


def test_evaluate_missing_logs_exit_two(tmp_path):
    assert main(["evaluate", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2
