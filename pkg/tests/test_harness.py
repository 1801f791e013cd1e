import json

import numpy as np
import pytest
import yaml

from spacerl import verify
from spacerl.algorithms import AlgoConfig, HdController, TrainState
from spacerl.baselines import evaluate, handcrafted_baseline, pretrain_baseline
from spacerl.cli import main
from spacerl.config import (BaselineRecipe, ExperimentConfig, config_to_dict, dump_config, load_config,
                            parse_config)
from spacerl.envs import point_circle_env
from spacerl.errors import ConfigError
from spacerl.persist import (METRICS_HEADER, CheckpointError, aggregate, encode_checkpoint, export_plotdata,
                             load_checkpoint, read_metrics, save_checkpoint)
from spacerl.policy import GaussianPolicy
from spacerl.subproblem import project

from conftest import random_policy


def write_config(path, **overrides):
    raw = {
        "env": {"name": "point_circle"},
        "algo": {"algo": "SPACE", "n_iters": 2, "batch_steps": 200},
        "baseline": {"kind": "handcrafted", "tag": "zero"},
        "output": {"dir": str(path.parent / "run")},
        "seeds": [0],
    }
    for key, value in overrides.items():
        raw[key] = value
    path.write_text(yaml.safe_dump(raw))
    return path


# ---- config

def test_config_roundtrip(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.yaml", seeds=[3, 1]))
    again = parse_config(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert config_to_dict(again) == config_to_dict(cfg)


def test_config_float_strings_coerced(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("algo: {delta: 1e-3, n_iters: 1}\nseeds: [0]\n")
    assert load_config(p).algo.delta == 1e-3


@pytest.mark.parametrize("raw", [
    {"algo": {"detla": 1e-4}},
    {"extra": 1},
    {"seeds": []},
    {"seeds": [-1]},
    {"env": {"name": "nowhere"}},
    {"baseline": {"kind": "checkpoint", "path": "missing.spck"}},
    {"baseline": {"kind": "pretrain"}},
    {"baseline": {"kind": "pretrain", "recipe": {"variant": "cost", "algo": "SPACE"}}},
    {"algo": {"seed": 3}},
])
def test_config_errors(raw, tmp_path):
    with pytest.raises(ConfigError):
        parse_config(raw, base_dir=tmp_path)


def test_config_checkpoint_path_relative_to_file(tmp_path):
    save_checkpoint(tmp_path / "b.spck", GaussianPolicy.create(4, 2))
    cfg = load_config(write_config(tmp_path / "c.yaml", baseline={"kind": "checkpoint", "path": "b.spck"}))
    assert load_checkpoint(cfg.baseline.path).policy.n_params == 12


# ---- checkpoints

def test_checkpoint_roundtrip_byte_identical(tmp_path, rng):
    pol = random_policy(rng, 4, 2, "mlp", hidden=5)
    state = TrainState(pol, HdController(17.25, 10.0, 0.1 + 0.2, -3.0), 0.7 ** 0.9, 12)
    p1 = save_checkpoint(tmp_path / "a.spck", pol, state, {"note": "x"})
    ck = load_checkpoint(p1)
    p2 = save_checkpoint(tmp_path / "b.spck", ck.policy, ck.train_state, ck.meta)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(ck.policy.theta, pol.theta)
    assert ck.train_state.hd == state.hd and ck.train_state.lam == state.lam


def test_checkpoint_layout_and_errors(tmp_path):
    data = encode_checkpoint(GaussianPolicy.create(1, 1).with_theta(np.array([1.5, -2.0, 0.25])))
    assert data[:4] == b"SPCK" and data[4:8] == (1).to_bytes(4, "little")
    np.testing.assert_array_equal(np.frombuffer(data[-24:], "<f8"), [1.5, -2.0, 0.25])
    bad = tmp_path / "bad.spck"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


# ---- metrics and plot data

def _metrics(path, rows):
    path.write_text(METRICS_HEADER + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


def test_plotdata_single_seed_zero_std(tmp_path):
    m = _metrics(tmp_path / "m.csv", [(0, 0, 1, 2, 3, 5, 1, 0), (0, 1, 2, 3, 4, 6, 1, 0)])
    export_plotdata(m, tmp_path / "plot")
    lines = (tmp_path / "plot" / "J_C.csv").read_text().splitlines()
    assert lines[0] == "iter,mean,std,n"
    assert [ln.split(",")[2] for ln in lines[1:]] == ["0", "0"]


def test_plotdata_identical_seeds(tmp_path):
    m = _metrics(tmp_path / "m.csv", [(0, 0, 1, 2, 3, 5, 1, 0), (1, 0, 1, 2, 3, 5, 1, 0)])
    assert aggregate(read_metrics(m), "J_R") == [(0, 1.0, 0.0, 2)]


def test_plotdata_hand_computed(tmp_path):
    m = _metrics(tmp_path / "m.csv", [(0, 0, 1.0, 2.0, 0.0, 5.0, 1, 0), (1, 0, 3.0, 6.0, 0.5, 9.0, 1, 0),
                                      (0, 1, -1.0, 4.0, 0.0, 5.0, 1, 0), (1, 1, 1.0, 4.0, 1.5, 9.0, 1, 0)])
    rows = read_metrics(m)
    assert aggregate(rows, "J_R") == [(0, 2.0, 1.0, 2), (1, 0.0, 1.0, 2)]
    assert aggregate(rows, "J_C") == [(0, 4.0, 2.0, 2), (1, 4.0, 0.0, 2)]
    assert aggregate(rows, "h_D") == [(0, 7.0, 2.0, 2), (1, 7.0, 2.0, 2)]


def test_malformed_metrics_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("seed,iter\n0,0\n")
    assert main(["export-plotdata", str(bad)]) == 2
    _metrics(bad, [(0, 0, 1, 2)])
    assert main(["export-plotdata", str(bad)]) == 2
    assert main(["export-plotdata", str(tmp_path / "nope.csv")]) == 2


# ---- CLI

def test_cli_missing_config_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert "not found" in capsys.readouterr().err


def test_cli_bad_config_exit_2(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("algo: {algo: SPACE, dleta: 1}\n")
    assert main(["train", "--config", str(p)]) == 2


def test_cli_single_row(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", algo={"algo": "PCPO", "n_iters": 1, "batch_steps": 100},
                       baseline={"kind": "none"})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER and len(lines) == 2
    assert (tmp_path / "o" / "seed_0" / "final.spck").is_file()


def test_cli_two_seeds_grouped_and_deterministic(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", seeds=[4, 2])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    seeds = [int(r["seed"]) for r in read_metrics(tmp_path / "a" / "metrics.csv")]
    assert seeds == [4, 4, 2, 2]


def test_cli_seed_override(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", seeds=[0, 1])
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed-override", "9"]) == 0
    assert {r["seed"] for r in read_metrics(tmp_path / "o" / "metrics.csv")} == {9}


def test_cli_runtime_failure_exit_1(tmp_path, capsys, monkeypatch):
    import spacerl.algorithms as algorithms

    def boom(*args, **kwargs):
        raise FloatingPointError("synthetic")

    monkeypatch.setattr(algorithms, "space_update", boom)
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "iteration 0" in capsys.readouterr().err


def test_cli_eval(tmp_path, capsys):
    save_checkpoint(tmp_path / "p.spck", GaussianPolicy.create(4, 2), meta={"env": "point_circle"})
    assert main(["eval", "--checkpoint", str(tmp_path / "p.spck"), "--episodes", "3"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) == {"J_R", "J_C", "J_D", "episodes"} and report["episodes"] == 3


def test_cli_verify_small(capsys):
    assert main(["verify", "--instances", "30"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_verify_detects_sign_flip():
    def flipped(step, constraint, metric, l_inv_normal=None):
        corr, lam = project(step, constraint, metric)
        return -corr, lam

    report = verify.run_all(n_instances=20, project_fn=flipped)
    assert not report["passed"]
    assert not report["checks"]["contraction"]["passed"]


# ---- baselines

def test_handcrafted_zero():
    pol = handcrafted_baseline("zero", point_circle_env(), AlgoConfig())
    assert not pol.theta.any()


@pytest.fixture(scope="module")
def pretrained():
    env, algo = point_circle_env(), AlgoConfig()
    return env, {v: pretrain_baseline(BaselineRecipe(variant=v), env, algo) for v in ("cost", "reward")}


def test_cost_baseline_is_safe(pretrained):
    env, pols = pretrained
    assert evaluate(env, pols["cost"], n_episodes=20)["J_C"] <= 0.1


def test_reward_baseline_violates(pretrained):
    env, pols = pretrained
    assert evaluate(env, pols["reward"], n_episodes=20)["J_C"] > 5.0


def test_pretrain_reproducible(pretrained):
    env, pols = pretrained
    again = pretrain_baseline(BaselineRecipe(variant="cost", iters=150), env, AlgoConfig())
    np.testing.assert_array_equal(again.theta, pols["cost"].theta)


def test_cli_pretrain_writes_tagged_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml",
                       baseline={"kind": "pretrain", "recipe": {"variant": "near", "iters": 2, "batch_steps": 200}})
    assert main(["pretrain-baseline", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    ck = load_checkpoint(tmp_path / "b" / "baseline_near.spck")
    assert ck.meta["recipe"]["variant"] == "near" and ck.meta["recipe"]["iters"] == 2
    assert "J_C" in json.loads(capsys.readouterr().out)
    assert isinstance(load_config(cfg), ExperimentConfig)


@pytest.mark.parametrize("name", ["pc_space.yaml", "pc_pcpo.yaml", "pc_baseline_cost.yaml", "gather_dpcpo.yaml"])
def test_shipped_configs_parse(name):
    from pathlib import Path
    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    assert parse_config(yaml.safe_load(dump_config(cfg))) == cfg
