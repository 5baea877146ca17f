import json
import os
import shutil

import numpy as np
import pytest

from rail.cli import main
from rail.formats import file_digest, read_checkpoint, read_demos
from rail.highway import DrivingStats


def write_json(path, payload):
    path.write_text(json.dumps(payload, indent=1))
    return str(path)


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def env_config_payload(**overrides):
    payload = {"ray_count": 8, "episode_horizon": 50,
               "traffic_density": 40.0, "road_length": 600.0}
    payload.update(overrides)
    return payload


def run_config_payload(tmp_path, **rail_overrides):
    rail = {"directions": 3, "iterations": 5, "eval_period": 2, "seed": 9}
    rail.update(rail_overrides)
    return {
        "experiment": "exp",
        "output_dir": str(tmp_path / "runs"),
        "demos": str(tmp_path / "expert.rdem"),
        "env": env_config_payload(),
        "rail": rail,
        "bc": {"epochs": 150, "seed": 2},
        "policy": {"kind": "two_layer", "hidden": 6},
    }


def gen_demos(workdir, episodes=5, seed=1):
    cfg_path = write_json(workdir / "env.json", env_config_payload())
    rc = main(["gen-expert", "--config", cfg_path, "--episodes",
               str(episodes), "--seed", str(seed), "--out",
               str(workdir / "expert.rdem")])
    assert rc == 0
    return cfg_path


# --- gen-expert ----------------------------------------------------------------

def test_gen_expert_writes_file_and_sidecar(workdir):
    gen_demos(workdir, episodes=5)
    episodes, header = read_demos(workdir / "expert.rdem")
    assert header["episodes"] == 5
    assert len(episodes) == 5
    sidecar = (workdir / "expert.rdem.stats.csv").read_text().splitlines()
    assert sidecar[0] == DrivingStats.CSV_HEADER
    assert len(sidecar) == 2


def test_gen_expert_requested_40_episodes(workdir):
    cfg_path = write_json(workdir / "env.json",
                          env_config_payload(episode_horizon=30))
    rc = main(["gen-expert", "--config", cfg_path, "--episodes", "40",
               "--seed", "3", "--out", str(workdir / "e40.rdem")])
    assert rc == 0
    _, header = read_demos(workdir / "e40.rdem")
    assert header["episodes"] == 40


def test_gen_expert_zero_episodes_is_usage_error(workdir):
    cfg_path = write_json(workdir / "env.json", env_config_payload())
    rc = main(["gen-expert", "--config", cfg_path, "--episodes", "0",
               "--seed", "1", "--out", str(workdir / "x.rdem")])
    assert rc == 2


def test_gen_expert_idempotent(workdir):
    cfg_path = write_json(workdir / "env.json", env_config_payload())
    for name in ("a.rdem", "b.rdem"):
        rc = main(["gen-expert", "--config", cfg_path, "--episodes", "4",
                   "--seed", "8", "--out", str(workdir / name)])
        assert rc == 0
    assert file_digest(workdir / "a.rdem") == file_digest(workdir / "b.rdem")


def test_gen_expert_rejects_unknown_config_keys(workdir):
    cfg_path = write_json(workdir / "env.json",
                          env_config_payload(lane_widht=3.0))
    rc = main(["gen-expert", "--config", cfg_path, "--episodes", "2",
               "--seed", "1", "--out", str(workdir / "x.rdem")])
    assert rc == 2


def test_rail_seed_env_var_overrides_flag(workdir, monkeypatch):
    cfg_path = write_json(workdir / "env.json", env_config_payload())
    monkeypatch.setenv("RAIL_SEED", "77")
    rc = main(["gen-expert", "--config", cfg_path, "--episodes", "3",
               "--seed", "1", "--out", str(workdir / "a.rdem")])
    assert rc == 0
    monkeypatch.delenv("RAIL_SEED")
    rc = main(["gen-expert", "--config", cfg_path, "--episodes", "3",
               "--seed", "77", "--out", str(workdir / "b.rdem")])
    assert rc == 0
    assert file_digest(workdir / "a.rdem") == file_digest(workdir / "b.rdem")


# --- train ---------------------------------------------------------------------

def metrics_without_seconds(path):
    lines = path.read_text().splitlines()
    return [",".join(line.split(",")[:-1]) for line in lines]


def test_train_bc_then_rail_with_init(workdir):
    gen_demos(workdir)
    run_path = write_json(workdir / "run.json", run_config_payload(workdir))
    assert main(["train", "--config", run_path, "--algo", "bc"]) == 0
    run_dir = workdir / "runs" / "exp"
    assert (run_dir / "bc_policy.rckp").exists()
    assert (run_dir / "bc_metrics.csv").read_text().startswith("epoch,loss")
    assert main(["train", "--config", run_path, "--algo", "rail",
                 "--init", str(run_dir / "bc_policy.rckp")]) == 0
    metrics = (run_dir / "metrics.csv").read_text().splitlines()
    assert metrics[0] == ("iter,mean_reward,max_reward,sigma_r,disc_loss,"
                          "nu,seconds")
    assert len(metrics) == 6
    assert (run_dir / "policy_final.rckp").exists()
    ckpt = read_checkpoint(run_dir / "policy_final.rckp")
    assert ckpt.disc is not None
    assert main(["verify", "--run", str(run_dir)]) == 0


def test_train_rail_worker_count_does_not_change_metrics(workdir):
    gen_demos(workdir)
    digests = {}
    for workers in (1, 2):
        payload = run_config_payload(workdir)
        payload["experiment"] = f"w{workers}"
        run_path = write_json(workdir / f"run{workers}.json", payload)
        assert main(["train", "--config", run_path, "--algo", "rail",
                     "--workers", str(workers)]) == 0
        metrics = metrics_without_seconds(
            workdir / "runs" / f"w{workers}" / "metrics.csv")
        digests[workers] = metrics
    assert digests[1] == digests[2]


def test_train_rail_init_shape_mismatch_fails_before_training(workdir):
    gen_demos(workdir)
    payload = run_config_payload(workdir)
    run_path = write_json(workdir / "run.json", payload)
    # build a checkpoint with the wrong observation width
    from rail.formats import write_checkpoint
    from rail.policy import NormalizerState, PolicyParams
    bad = workdir / "bad.rckp"
    write_checkpoint(bad, PolicyParams.zeros("two_layer", 12, 6),
                     NormalizerState.identity(12))
    rc = main(["train", "--config", run_path, "--algo", "rail",
               "--init", str(bad)])
    assert rc == 2
    assert not (workdir / "runs" / "exp" / "metrics.csv").exists()


def test_train_resume_continues_monotonically(workdir):
    gen_demos(workdir)
    payload = run_config_payload(workdir, iterations=4)
    run_path = write_json(workdir / "run.json", payload)
    assert main(["train", "--config", run_path, "--algo", "rail"]) == 0
    run_dir = workdir / "runs" / "exp"
    # pretend the run died after iteration 2: drop later checkpoints and
    # the final artifact, keep a stale metrics file
    for ckpt in ("ckpt_000003.rckp", "ckpt_000004.rckp",
                 "policy_final.rckp"):
        (run_dir / ckpt).unlink()
    payload["rail"]["iterations"] = 6
    run_path = write_json(workdir / "run.json", payload)
    assert main(["train", "--config", run_path, "--algo", "rail",
                 "--resume"]) == 0
    rows = (run_dir / "metrics.csv").read_text().splitlines()[1:]
    iterations = [int(r.split(",")[0]) for r in rows]
    assert iterations == [1, 2, 3, 4, 5, 6]
    assert (run_dir / "policy_final.rckp").exists()


# --- eval ----------------------------------------------------------------------

def test_eval_expert_matches_direct_evaluation(workdir):
    cfg_path = gen_demos(workdir)
    out = workdir / "stats.csv"
    rc = main(["eval", "--expert", "--config", cfg_path, "--episodes", "4",
               "--seed", "21", "--out", str(out)])
    assert rc == 0
    from conftest import small_config
    from rail.highway import evaluate_policy, scripted_expert
    want = evaluate_policy(scripted_expert, small_config(
        episode_horizon=50), episodes=4, seed=21)
    header, row = out.read_text().splitlines()
    assert header == DrivingStats.CSV_HEADER
    got = [float(v) for v in row.split(",")]
    assert got == pytest.approx([want.avg_speed, want.lane_changes,
                                 want.overtakes, want.longitudinal,
                                 want.lateral], rel=1e-12)


def test_eval_zero_weight_checkpoint_maintains_start_speed(workdir):
    cfg_path = write_json(workdir / "env.json",
                          env_config_payload(traffic_density=0.0))
    from rail.formats import write_checkpoint
    from rail.policy import NormalizerState, PolicyParams
    n = 3 * (2 * 8 + 1)
    ckpt = workdir / "zero.rckp"
    write_checkpoint(ckpt, PolicyParams.zeros("two_layer", n, 6),
                     NormalizerState.identity(n))
    out = workdir / "stats.csv"
    rc = main(["eval", "--checkpoint", str(ckpt), "--config", cfg_path,
               "--episodes", "2", "--seed", "5", "--out", str(out)])
    assert rc == 0
    row = [float(v) for v in out.read_text().splitlines()[1].split(",")]
    # zero logits tie-break to maintain: the start speed never changes
    assert row[0] == 70.0
    assert row[1] == 0.0


def test_eval_requires_policy_source(workdir):
    cfg_path = write_json(workdir / "env.json", env_config_payload())
    assert main(["eval", "--config", cfg_path]) == 2


# --- export-weights --------------------------------------------------------------

def make_paper_scale_checkpoint(path):
    from rail.formats import write_checkpoint
    from rail.policy import NormalizerState, PolicyParams
    rng = np.random.default_rng(0)
    params = PolicyParams("two_layer", rng.standard_normal((10, 363)),
                          rng.standard_normal((5, 10)))
    write_checkpoint(path, params, NormalizerState.identity(363))


def test_export_first_layer_reshaped_for_heatmap(workdir):
    ckpt = workdir / "p.rckp"
    make_paper_scale_checkpoint(ckpt)
    out = workdir / "w1.csv"
    rc = main(["export-weights", "--checkpoint", str(ckpt), "--layer", "1",
               "--reshape", "30x121", "--out", str(out)])
    assert rc == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 30
    assert all(len(r.split(",")) == 121 for r in rows)
    hist = (workdir / "w1_hist.csv").read_text().splitlines()
    assert hist[0] == "bin_left,bin_right,count"
    assert sum(int(r.split(",")[2]) for r in hist[1:]) == 10 * 363


def test_export_second_layer_default_shape(workdir):
    ckpt = workdir / "p.rckp"
    make_paper_scale_checkpoint(ckpt)
    out = workdir / "w2.csv"
    rc = main(["export-weights", "--checkpoint", str(ckpt), "--layer", "2",
               "--out", str(out)])
    assert rc == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 5
    assert all(len(r.split(",")) == 10 for r in rows)


def test_export_bad_reshape_lists_factorizations(workdir, capsys):
    ckpt = workdir / "p.rckp"
    make_paper_scale_checkpoint(ckpt)
    rc = main(["export-weights", "--checkpoint", str(ckpt), "--layer", "2",
               "--reshape", "7x7", "--out", str(workdir / "x.csv")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "50" in err and "5x10" in err


# --- verify ------------------------------------------------------------------------

def test_verify_detects_tampering(workdir):
    gen_demos(workdir)
    run_path = write_json(workdir / "run.json", run_config_payload(workdir))
    assert main(["train", "--config", run_path, "--algo", "rail"]) == 0
    run_dir = workdir / "runs" / "exp"
    assert main(["verify", "--run", str(run_dir)]) == 0
    metrics = run_dir / "metrics.csv"
    metrics.write_text(metrics.read_text() + "tampered\n")
    assert main(["verify", "--run", str(run_dir)]) == 1
