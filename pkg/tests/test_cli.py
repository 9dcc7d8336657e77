from __future__ import annotations

import csv

from powr.cli import main
from powr.env import make_env
from powr.harness import evaluate
from powr.pmd import SoftmaxPolicy


def write_config(tmp_path, text=None):
    path = tmp_path / "grid.toml"
    path.write_text(text or 'env = "gridworld4"\neta = 2.0\nrounds = [[400, 5], [400, 5]]\n'
                            'eval_episodes = 30\nseeds = [0, 1]\n')
    return path


def test_verify_passes(capsys):
    assert main(["verify", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "performance difference" in out


def test_missing_config_exit_2(capsys):
    assert main(["train", "--config", "no/such/file.toml"]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_toml_exit_2(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path, "env = [unclosed"))]) == 2


def test_unknown_override_exit_2(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path)), "--override", "etaa=1"]) == 2


def test_no_subcommand_exit_2():
    assert main([]) == 2


def test_train_eta_zero_is_flat(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--config", str(write_config(tmp_path)), "--override", "eta=0", "--seed", "5",
                 "--out", str(out)])
    assert code == 0
    rows = [r for r in csv.DictReader(open(out / "curve.csv")) if r["seed"] == "5"]
    env = make_env("gridworld4")
    for rnd, row in enumerate(rows):
        expected = evaluate(SoftmaxPolicy.uniform(4), env, 30, seed=5 * 1000 + rnd)[0]
        assert float(row["mean"]) == expected


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    first = capsys.readouterr().out
    assert main(["eval", "--policy", str(out / "policy_seed0.npz"), "--episodes", "10"]) == 0
    assert "env=gridworld4" in capsys.readouterr().out
    # same inputs, same output
    assert main(["train", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    assert capsys.readouterr().out == first


def test_eval_missing_policy():
    assert main(["eval", "--policy", "missing.npz"]) == 2


def test_dump_config(capsys):
    assert main(["dump-config", "--config", "mountaincar", "--override", "kernel.sigma=0.15"]) == 0
    out = capsys.readouterr().out
    assert "sigma = 0.15" in out and 'family = "laplacian"' in out


def test_numerical_failure_exit_3(tmp_path):
    # a tiny lam on a deterministic self-loop cannot be rescued by three refits
    cfg = write_config(tmp_path, 'env = "chain"\ngamma = 0.9999999\nlam = 1e-15\nrounds = [[2000, 3]]\n'
                                 'eval_episodes = 2\nseeds = [0]\n')
    assert main(["train", "--config", str(cfg)]) == 3
