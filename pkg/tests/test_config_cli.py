import json

import pytest

from gmelstm import cli
from gmelstm.config import ConfigError, RUN_ROOT_ENV, apply_overrides, config_from_dict, load_config
from gmelstm.data import load_dataset, manifest_path

SMALL = {
    "data": {"synthetic": {"task": "keyword", "n_clips": 40, "length": 5},
             "synthetic_split": [20, 10, 10]},
    "model": {"hidden": 4, "head_units": 3},
    "optimizer": {"lr": 0.01, "max_epochs": 3, "patience": 2},
    "controller": {"n_samples": 2, "epoch_num": 1, "inner_max_epochs": 2, "hidden": 4},
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_defaults():
    cfg = config_from_dict({"data": {"synthetic": {}}})
    assert (cfg.model.hidden, cfg.model.head_units) == (64, 50)
    assert (cfg.optimizer.lr, cfg.optimizer.batch_size) == (5e-4, 32)
    c = cfg.controller
    assert (c.lr, c.n_samples, c.epoch_num, c.decay, c.advantage_mode) == \
        (1e-4, 5, 20, 0.9, "ratio")


@pytest.mark.parametrize("bad", [
    {"data": {"synthetic": {}}, "modell": {}},
    {"data": {"synthetic": {}}, "optimizer": {"learning_rate": 1}},
    {"data": {}},
    {"data": {"synthetic": {}, "dataset": "x.jsonl"}},
    {"data": {"synthetic": {"task": "bogus"}}},
    {"data": {"synthetic": {}}, "controller": {"advantage_mode": "x"}},
    {"data": {"synthetic": {}}, "controller": {"gated": ["language"]}},
    {"data": {"synthetic": {}}, "optimizer": {"lr": -1}},
    {"data": {"synthetic": {}}, "methods": ["SVM"]},
    {"data": {"synthetic": {}}, "subsets": ["text+smell"]},
])
def test_validation_rejects(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_overrides_and_bad_json(tmp_path, cfg_file):
    cfg = apply_overrides(load_config(cfg_file), {"optimizer.lr": 0.2, "seed": 3})
    assert cfg.optimizer.lr == 0.2 and cfg.seed == 3
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"optimizer.nope": 1})
    broken = tmp_path / "b.json"
    broken.write_text("{")
    with pytest.raises(ConfigError):
        load_config(broken)


def test_run_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path))
    cfg = config_from_dict({"data": {"synthetic": {}}})
    assert cfg.resolved_run_dir("train") == tmp_path / "train"


def test_cli_synth(tmp_path, capsys):
    out = tmp_path / "data.jsonl"
    assert cli.main(["synth", "--task", "keyword", "--clips", "200", "--seed", "1",
                     "-o", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 200
    assert json.loads(manifest_path(out).read_text())["count"] == 200
    assert len(load_dataset(out)) == 200


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--no-such-flag"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_cli_config_error_exit_1(tmp_path, cfg_file, capsys):
    assert cli.main(["train", "--config", str(cfg_file), "--set", "optimizer.bad=1"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {}}))
    assert cli.main(["train", "--config", str(bad)]) == 1
    assert "config error" in capsys.readouterr().err


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--seed", "7", "--configs", "3"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert last.startswith("max relative error:") and float(last.split(":")[1]) < 1e-4


def test_cli_train_twice_identical(tmp_path, cfg_file, monkeypatch, capsys):
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path / "runs"))
    assert cli.main(["train", "--config", str(cfg_file)]) == 0
    first = (tmp_path / "runs" / "train" / "metrics.csv").read_text()
    assert cli.main(["train", "--config", str(cfg_file), "--run-dir", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2" / "metrics.csv").read_text() == first
    assert first.splitlines()[0] == "epoch,split,mae,acc,f1"
    for name in ("config.json", "preprocess.json", "model.json", "test_report.json"):
        assert (tmp_path / "r2" / name).exists()


def test_cli_gme_eval_inspect_ablate(tmp_path, cfg_file, capsys):
    run = tmp_path / "gme"
    assert cli.main(["train-gme", "--config", str(cfg_file), "--run-dir", str(run)]) == 0
    for name in ("rewards.csv", "controllers.json", "test_gates.jsonl", "metrics.csv"):
        assert (run / name).exists()
    assert len((run / "rewards.csv").read_text().splitlines()) == 1 + 2
    assert cli.main(["eval", "--config", str(cfg_file), "--model", str(run / "model.json"),
                     "--controllers", str(run / "controllers.json"),
                     "--run-dir", str(tmp_path / "ev")]) == 0
    assert "MAE" in capsys.readouterr().out
    assert cli.main(["inspect", "--config", str(cfg_file), "--model", str(run / "model.json"),
                     "--controllers", str(run / "controllers.json"), "--limit", "2",
                     "--run-dir", str(tmp_path / "ins")]) == 0
    out = capsys.readouterr().out
    assert "**" in out or "tie" in out
    assert cli.main(["ablate", "--config", str(cfg_file), "--run-dir", str(tmp_path / "ab")]) == 0
    table = (tmp_path / "ab" / "ablation.txt").read_text().splitlines()
    assert [line.split(" | ")[0].strip() for line in table[2:]] == \
        ["LSTM", "LSTM(A)", "GME-LSTM(A)"]


def test_selection_without_normalization():
    from gmelstm.experiments import prepare_data
    cfg = config_from_dict({"data": {"synthetic": {"task": "noise", "n_clips": 30},
                                     "synthetic_split": [20, 5, 5], "k_visual": 2,
                                     "normalize": False}})
    data = prepare_data(cfg)
    assert data.test.v.shape[-1] == 2 and data.preprocess.scales["visual"] == [1.0, 1.0]
