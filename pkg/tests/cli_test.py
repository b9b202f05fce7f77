import json

import pandas as pd
import pytest

from sure_lab.cli import build_parser, dispatch
from sure_lab.configuration import Method


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = tmp_path / "run.json"
    path.write_text(tiny_config.model_dump_json())
    return path


def read_error(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_verify_passes(capsys):
    assert dispatch(["verify", "--seeds", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_missing_config_is_reported_as_json(tmp_path, capsys):
    code = dispatch(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "out")])
    assert code == 1
    err = read_error(capsys)
    assert err["error"] == "ConfigError"
    assert "nope.json" in err["message"]


def test_invalid_config_is_reported(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"mask_fraction": 1.5}))
    assert dispatch(["pretrain", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
    assert read_error(capsys)["error"] == "ConfigError"


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        dispatch(["train", "--config", "x.json"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        dispatch(["train", "--config", "x.json", "--out", "o", "--seed", "1", "--seeds", "1,2"])
    assert exc.value.code == 2


def test_method_choices_match_tags():
    args = build_parser().parse_args(["train", "--config", "c", "--out", "o", "--method", "ablation-2b"])
    assert Method(args.method) == Method.ABLATION_2B


def test_gen_data(config_file, tmp_path, capsys):
    out = tmp_path / "data"
    assert dispatch(["gen-data", "--config", str(config_file), "--out", str(out), "--seed", "9"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9
    assert manifest["command"] == "gen-data"
    assert "train/modality_0.csv" in manifest["files"]
    assert json.loads((out / "dataset.json").read_text())["seed"] == 9


def test_pretrain(config_file, tmp_path):
    out = tmp_path / "pre"
    assert dispatch(["pretrain", "--config", str(config_file), "--out", str(out)]) == 0
    assert (out / "backbone.ckpt.json").exists()
    assert json.loads((out / "manifest.json").read_text())["command"] == "pretrain"


def test_train_eval_defer(config_file, tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert dispatch(["train", "--config", str(config_file), "--out", str(run_dir)]) == 0
    for name in ("summary.json", "records.csv", "convergence.csv", "metrics.json", "deferral.csv", "manifest.json"):
        assert (run_dir / name).exists(), name

    assert dispatch(["eval", "--run", str(run_dir), "--scenario", "missing=2"]) == 0
    metrics = json.loads((run_dir / "eval" / "metrics.json").read_text())
    assert list(metrics["scenarios"]) == ["missing=2"]

    assert dispatch(["defer", "--run", str(run_dir), "--scenario", "missing=0,1", "--quantiles", "0.5,0.65"]) == 0
    frame = pd.read_csv(run_dir / "defer" / "deferral.csv")
    assert frame["scenario"].unique().tolist() == ["missing=0,1"]
    assert frame["quantile"].tolist() == [0.5, 0.65]


def test_defer_without_uncertainty_fails(config_file, tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert dispatch(["train", "--config", str(config_file), "--out", str(run_dir), "--method", "ablation-2a"]) == 0
    assert dispatch(["defer", "--run", str(run_dir)]) == 1
    assert read_error(capsys)["error"] == "ContractError"


def test_train_many_seeds(config_file, tmp_path):
    out = tmp_path / "seeds"
    assert dispatch(["train", "--config", str(config_file), "--out", str(out), "--seeds", "1,2"]) == 0
    for seed in (1, 2):
        summary = json.loads((out / f"seed_{seed}" / "summary.json").read_text())
        assert summary["seed"] == seed


def test_bad_seed_lists_rejected():
    for bad in ("a,b", "-1", ""):
        with pytest.raises(SystemExit):
            dispatch(["train", "--config", "c", "--out", "o", "--seeds", bad])


def test_train_uses_seeds_from_config(tiny_config, tmp_path):
    path = tmp_path / "multi.json"
    path.write_text(tiny_config.model_copy(update={"seeds": [3, 4]}).model_dump_json())
    out = tmp_path / "from_config"
    assert dispatch(["train", "--config", str(path), "--out", str(out)]) == 0
    for seed in (3, 4):
        summary = json.loads((out / f"seed_{seed}" / "summary.json").read_text())
        assert summary["seed"] == seed
        saved = json.loads((out / f"seed_{seed}" / "config.json").read_text())
        assert saved["seeds"] == []


def test_explicit_seed_overrides_config_seeds(tiny_config, tmp_path):
    path = tmp_path / "multi.json"
    path.write_text(tiny_config.model_copy(update={"seeds": [3, 4]}).model_dump_json())
    out = tmp_path / "single"
    assert dispatch(["train", "--config", str(path), "--out", str(out), "--seed", "5"]) == 0
    assert json.loads((out / "summary.json").read_text())["seed"] == 5
    assert not (out / "seed_3").exists()
