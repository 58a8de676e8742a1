import json
import subprocess
import sys

import pytest

from dgwm.cli import ExperimentConfig, load_config, parse_assignments, run_command
from dgwm.errors import ParameterError
from dgwm.model import ModelConfig
from dgwm.pipeline import TrainConfig

SMALL = ["--samples-per-class-per-domain", "20", "--epochs", "2", "--steps-per-epoch", "3"]


def _write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- config loading ----------------------------------------------------------------


def test_empty_config_gives_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, ""))
    assert cfg.train_config() == TrainConfig()
    assert cfg.model_config() == ModelConfig(input_dim=20, num_classes=5)
    assert cfg.split_plan().target_domain == 3
    assert cfg.get("trials") == 5


def test_epsilon_value_parses(tmp_path):
    cfg = load_config(_write(tmp_path, "epsilon_sq=1.0\n"))
    assert cfg.model_config().epsilon_sq == 1.0


def test_comments_and_blank_lines(tmp_path):
    cfg = load_config(_write(tmp_path, "# exp\n\ntau = 0.8  # lower\nhidden=16,8\nsetting=one-labeled-domain\n"))
    assert cfg.train_config().tau == 0.8
    assert cfg.model_config().hidden == (16, 8)
    assert cfg.split_plan().setting == "one_labeled_domain"


def test_parse_error_names_line():
    with pytest.raises(ParameterError, match=r"exp:3:"):
        parse_assignments(["tau=0.9", "", "epochs=lots"], "exp")
    with pytest.raises(ParameterError, match=r"exp:2:"):
        parse_assignments(["tau=0.9", "no equals sign"], "exp")


def test_unknown_key_rejected():
    with pytest.raises(ParameterError):
        ExperimentConfig({"learning_rate": 0.1})


def test_trial_seeds_stride():
    cfg = ExperimentConfig({"seed": 10, "seed_stride": 3, "trials": 3})
    assert cfg.trial_seeds() == [10, 13, 16]


@pytest.mark.parametrize("text", ["tau=1.5\n", "bogus_key=1\n", "trials=0\n", "epochs=x\n"])
def test_bad_config_exits_2(tmp_path, text, capsys):
    path = _write(tmp_path, text)
    assert run_command(["train", "--config", str(path), "--output-dir", str(tmp_path)]) == 2
    assert capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert run_command(["train", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_unknown_flag_exits_2(capsys):
    assert run_command(["train", "--no-such-flag", "1"]) == 2
    assert run_command([]) == 2


def test_flags_override_file(tmp_path):
    path = _write(tmp_path, "tau=0.8\nepochs=7\n")
    rc = run_command(["gen-data", "--config", str(path), "--tau", "0.6", "--output-dir", str(tmp_path / "o"),
                      "--run-id", "r", "--samples-per-class-per-domain", "5"])
    assert rc == 0
    from dgwm.cli import build_parser, config_from_args
    args = build_parser().parse_args(["train", "--config", str(path), "--tau", "0.6"])
    cfg = config_from_args(args)
    assert cfg.train_config().tau == 0.6 and cfg.train_config().epochs == 7


# -- train -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    argv = ["train", "--setting", "few-labels", "--labels-per-class", "10", "--trials", "5",
            "--output-dir", str(root), "--run-id", "a", *SMALL]
    assert run_command(argv) == 0
    return root, argv


def test_train_writes_trials_and_aggregate(train_run):
    root, _ = train_run
    out = root / "a"
    for i in range(5):
        t = out / f"trial_{i}"
        assert (t / "history.csv").exists() and (t / "metrics.json").exists() and (t / "model.npz").exists()
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["seeds"] == [0, 1, 2, 3, 4]
    stat = agg["metrics"]["final_target_accuracy"]
    assert len(stat["values"]) == 5
    assert stat["mean"] == pytest.approx(sum(stat["values"]) / 5)
    assert stat["std"] >= 0


def test_train_deterministic(train_run):
    root, argv = train_run
    again = [*argv]
    again[again.index("a")] = "b"
    assert run_command(again) == 0
    a = {k: v for k, v in _files(root / "a").items() if k != "timing.json"}
    b = {k: v for k, v in _files(root / "b").items() if k != "timing.json"}
    assert a == b


def test_zero_stride_gives_zero_std(tmp_path):
    assert run_command(["train", "--trials", "3", "--seed-stride", "0", "--output-dir", str(tmp_path),
                        "--run-id", "z", *SMALL]) == 0
    agg = json.loads((tmp_path / "z" / "aggregate.json").read_text())
    assert agg["metrics"]["final_target_accuracy"]["std"] == 0.0


def test_default_run_id_from_config(tmp_path):
    assert run_command(["train", "--trials", "1", "--output-dir", str(tmp_path), *SMALL]) == 0
    (run,) = list(tmp_path.iterdir())
    assert run.name.startswith("train-")


def test_output_dir_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("DGWM_OUTPUT_DIR", str(tmp_path))
    assert run_command(["gen-data", "--run-id", "g", "--samples-per-class-per-domain", "5"]) == 0
    assert (tmp_path / "g" / "dataset.csv").exists()


# -- other subcommands -------------------------------------------------------------


def test_eval_checkpoint(train_run, tmp_path):
    root, _ = train_run
    ckpt = root / "a" / "trial_0" / "model.npz"
    assert run_command(["eval", "--checkpoint", str(ckpt), "--samples-per-class-per-domain", "20",
                        "--output-dir", str(tmp_path), "--run-id", "e"]) == 0
    res = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert res["target_domain"] == 3 and 0.0 <= res["target_accuracy"] <= 1.0


def test_eval_input_mismatch_exits_2(train_run, tmp_path):
    ckpt = train_run[0] / "a" / "trial_0" / "model.npz"
    assert run_command(["eval", "--checkpoint", str(ckpt), "--input-dim", "12", "--samples-per-class-per-domain",
                        "5", "--output-dir", str(tmp_path)]) == 2


def test_eval_missing_checkpoint_exits_1(tmp_path):
    assert run_command(["eval", "--checkpoint", str(tmp_path / "none.npz"), "--output-dir", str(tmp_path)]) == 1


def test_ablate_grid(tmp_path, capsys):
    rc = run_command(["ablate", "--grid", "modulation=true,false", "--grid", "hidden=8;16,8", "--trials", "2",
                      "--output-dir", str(tmp_path), "--run-id", "ab", *SMALL])
    assert rc == 0
    lines = (tmp_path / "ab" / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("modulation,hidden,target_accuracy_mean")
    assert len(lines) == 5
    assert "target_accuracy_mean" in capsys.readouterr().out


def test_ablate_bad_grid_key(tmp_path):
    assert run_command(["ablate", "--grid", "trials=1,2", "--output-dir", str(tmp_path)]) == 2
    assert run_command(["ablate", "--grid", "tau", "--output-dir", str(tmp_path)]) == 2


def test_sweep_tau(tmp_path):
    rc = run_command(["sweep", "--kind", "tau", "--values", "0.5,0.9,1.0", "--trials", "1",
                      "--output-dir", str(tmp_path), "--run-id", "s", *SMALL])
    assert rc == 0
    assert (tmp_path / "s" / "sweep.csv").read_text().startswith("seed,tau,variant")


def test_verify_prints_table(capsys, tmp_path):
    assert run_command(["verify", "--output-dir", str(tmp_path), "--run-id", "v"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert (tmp_path / "v" / "verify.txt").read_text().strip() == out.strip()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dgwm", "gen-data", "--samples-per-class-per-domain", "5",
                           "--output-dir", str(tmp_path), "--run-id", "m"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "dataset.csv").exists()
