from __future__ import annotations

import csv

import numpy as np
import pytest

from metaimagine import cli, metatrain
from metaimagine.nncore import ad

TINY = ["--n-tasks", "4", "--iterations", "2", "--explore-episodes", "1", "--ed-warmup-steps", "1", "--ed-steps", "1",
        "--policy-steps", "1", "--batch-size", "8", "--context-size", "8", "--contexts-per-task", "1",
        "--encoder-hidden", "8", "--policy-hidden", "8", "--eval-tasks", "0", "--probe-every", "0", "--quiet"]


def test_train_eval_interpolate_plot(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", *TINY, "--out-dir", str(out)]) == cli.EXIT_OK
    assert (out / "checkpoint.npz").exists()
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert len(rows) == 2
    assert cli.main(["eval", str(out), "--probe-pairs", "1", "--probe-vectors", "4", "--adapt-tasks", "2",
                     "--context-budget", "10"]) == cli.EXIT_OK
    assert (out / "eval.csv").exists()
    code = cli.main(["interpolate", str(out), "--count", "5"])
    captured = capsys.readouterr()
    # two training iterations rarely give a disentangled latent; either outcome must be clean
    assert code == cli.EXIT_OK and (out / "interpolated_tasks.csv").exists() or \
        code == cli.EXIT_FAILURE and "not disentangled" in captured.err
    assert cli.main(["plot", str(out), "--kind", "all"]) == cli.EXIT_OK
    printed = captured.out + capsys.readouterr().out
    assert "post-adaptation return" in printed and "latent_traversal.png" in printed


def test_missing_run_exits_1(tmp_path, capsys):
    assert cli.main(["eval", str(tmp_path / "nothing")]) == cli.EXIT_FAILURE
    assert "missing run artifact" in capsys.readouterr().err


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("env_id = cartpole\nbeta = 2.0\n")
    out = tmp_path / "wm"
    assert cli.main(["train-worldmodel", "--config", str(cfg), *TINY, "--beta", "3", "--out-dir", str(out)]) == 0
    saved = metatrain.TrainConfig.from_file(out / "config.txt")
    assert saved.env_id == "cartpole" and saved.beta == 3.0 and saved.n_tasks == 4


@pytest.mark.parametrize("args", [["--beta", "abc"], ["--env-id", "mujoco"], ["--latent-dim", "1"]])
def test_config_errors_exit_2(tmp_path, args, capsys):
    assert cli.main(["train", *TINY, *args, "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_key_in_config_file_exits_2(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("learning_rate = 1\n")
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG


def test_numeric_failure_exits_3(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(metatrain, "elbo_objective", lambda *a, **k: (ad.as_tensor(np.inf), {"elbo": np.inf}))
    assert cli.main(["train-worldmodel", *TINY, "--out-dir", str(tmp_path)]) == cli.EXIT_NUMERIC
    assert (tmp_path / "numeric_failure.json").exists()
    assert "numeric failure" in capsys.readouterr().err


def test_every_config_field_has_a_flag():
    import dataclasses

    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices["train"]
    flags = {s for a in sub._actions for s in a.option_strings}
    for f in dataclasses.fields(metatrain.TrainConfig):
        assert "--" + f.name.replace("_", "-") in flags
