import json
import os

import numpy as np
import pandas as pd
import pytest

from cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from volumes import read_array


@pytest.fixture
def synth_dir(tmp_path):
    out = str(tmp_path / "phantoms")
    assert main(["synth", "--seed", "1", "--count", "5", "--shape", "16x16x16", "--out", out]) == EXIT_OK
    return out


def test_synth_writes_manifest(synth_dir, capsys):
    with open(os.path.join(synth_dir, "manifest.json")) as f:
        manifest = json.load(f)
    assert manifest["count"] == 5 and manifest["shape"] == [16, 16, 16]
    assert manifest["phantom"]["noise_sigma"] == 0.1


def test_train_infer_eval_pipeline(synth_dir, tiny_train_config, registry, tmp_path, capsys):
    cfg_path = tmp_path / "train.json"
    settings = {k: v for k, v in tiny_train_config.items() if k not in ("data_dir", "out")}
    cfg_path.write_text(json.dumps(settings))
    ckpt = str(tmp_path / "model.dpbn")

    assert main(["train", "--config", str(cfg_path), "--out", ckpt, "--data", synth_dir]) == EXIT_OK
    assert os.path.exists(ckpt)
    assert "trained 2 iterations" in capsys.readouterr().out

    prob_path = str(tmp_path / "prob")
    assert main(["infer", "--ckpt", ckpt, "--volume", os.path.join(synth_dir, "case_000"),
                 "--window", "8x8x8", "--out", prob_path]) == EXIT_OK
    prob, sidecar = read_array(prob_path)
    assert prob.shape == (16, 16, 16) and prob.dtype == np.float64
    assert np.all((prob >= 0) & (prob <= 1))

    report = str(tmp_path / "metrics.json")
    assert main(["eval", "--pred", prob_path, "--truth", os.path.join(synth_dir, "case_000"),
                 "--out", report]) == EXIT_OK
    with open(report) as f:
        assert len(json.load(f)["cases"]) == 1
    assert os.path.exists(str(tmp_path / "metrics.csv"))

    assert main(["runs"]) == EXIT_OK
    assert "ce+dfb" in capsys.readouterr().out


def test_eval_identical_masks(synth_dir, tmp_path, capsys):
    truth = os.path.join(synth_dir, "case_001")
    assert main(["eval", "--pred", truth, "--truth", truth, "--out", str(tmp_path / "r.json")]) == EXIT_OK
    assert "dice 1.0000 jaccard 1.0000 hd95 0.0000 assd 0.0000" in capsys.readouterr().out


def test_dfbmap_export(synth_dir, tmp_path):
    out = str(tmp_path / "w")
    assert main(["dfbmap", "--mask", os.path.join(synth_dir, "case_002"), "--k", "3", "--out", out]) == EXIT_OK
    weights, sidecar = read_array(out)
    assert sidecar["k"] == 3
    assert weights.min() == 1.0 and weights.max() <= 27.0


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--module", "ce"]) == EXIT_OK
    assert "ce: max relative error" in capsys.readouterr().out


def test_report_export(tmp_path):
    table = pd.DataFrame([{"method": "Vanilla VNet", "setting": "volume", "dice_mean": 80.0, "dice_std": 1.0,
                           "jaccard_mean": 70.0, "jaccard_std": 1.0, "hd95_mean": 3.0, "hd95_std": 0.5,
                           "assd_mean": 1.0, "assd_std": 0.1}])
    table_path = tmp_path / "table.csv"
    table.to_csv(table_path, index=False)
    out = str(tmp_path / "table.xlsx")
    assert main(["report", "--table", str(table_path), "--out", out]) == EXIT_OK
    sheet = pd.read_excel(out, engine="openpyxl")
    assert sheet.loc[0, "Dice (%)"] == "80.00 ± 1.00"


def test_runs_with_empty_registry(registry, capsys):
    assert main(["runs"]) == EXIT_OK
    assert "no runs recorded" in capsys.readouterr().out


def test_malformed_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "m.dpbn")]) == EXIT_USAGE
    assert "malformed config" in capsys.readouterr().err

    bad.write_text(json.dumps({"lr": -1}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "m.dpbn")]) == EXIT_USAGE


def test_runtime_errors_exit_one(tmp_path, capsys):
    missing = str(tmp_path / "missing")
    assert main(["eval", "--pred", missing, "--truth", missing, "--out", str(tmp_path / "r.json")]) == EXIT_FAILURE
    assert "error: no volume sidecar" in capsys.readouterr().err


def test_bad_arguments_exit_two():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--shape", "16x16", "--out", "x"])
    assert exc.value.code == 2
