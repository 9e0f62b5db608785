import json
import subprocess
import sys

import pytest

from hnpipe.cli import ConfigError, config_hash, load_config, main

TINY = """
[run]
archs = [1, 3]
approaches = [1, 2, 3]
cv_folds = 3
workers = 2

[phantom]
n_patients = 8
dims = [24, 24, 12]
spacing = [2.5, 2.5, 2.0]
gtvp_radius_range = [4.0, 6.0]
gtvn_radius_range = [3.0, 5.0]

[train]
epochs = 2
lr = 0.05
lr_final = 0.005
lr_drop_epoch = 1

[rf1]
n_trees = 4

[rf2]
n_trees = 4

[gbt]
n_estimators = 6
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    assert main(["run-all", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return cfg, root / "run"


def test_run_all_layout(tiny):
    _, run = tiny
    for rel in [
        "data/clinical.csv", "seg/arch1/checkpoint.json", "seg/arch3/metrics.csv", "reports/seg_report.csv",
        "reports/surv_report.csv", "surv/approach3/model.json", "surv/approach2/shap_summary.csv",
        "surv/approach1/cv_table.csv", "surv/approach3/correlation.csv", "manifest.json",
    ]:
        assert (run / rel).is_file(), rel
    seg = (run / "reports/seg_report.csv").read_text().splitlines()
    assert len(seg) == 3
    surv = (run / "reports/surv_report.csv").read_text().splitlines()
    assert surv[0].startswith("approach,model,cv_mean_rmse") and len(surv) == 4
    man = json.loads((run / "manifest.json").read_text())
    assert man["command"] == "run-all" and man["seed"] == 0
    assert "reports/surv_report.csv" in man["outputs"]


def test_subcommand_chain(tiny, tmp_path):
    cfg, run = tiny
    data = run / "data"
    common = ["--config", str(cfg)]
    assert main(["features", *common, "--data", str(data), "--approach", "3", "--masks", str(run / "masks"), "--out", str(tmp_path / "f")]) == 0
    feats = tmp_path / "f/features_approach3.csv"
    assert "eGFR" in feats.read_text().splitlines()[0]
    assert main(["cv", *common, "--features", str(feats), "--approach", "3", "--out", str(tmp_path / "cv")]) == 0
    assert main(["train-surv", *common, "--features", str(feats), "--approach", "3", "--out", str(tmp_path / "m")]) == 0
    model = tmp_path / "m/model.json"
    assert model.read_bytes() == (run / "surv/approach3/model.json").read_bytes()
    assert main(["predict-surv", *common, "--features", str(feats), "--model", str(model), "--out", str(tmp_path / "p")]) == 0
    assert main(["explain", *common, "--features", str(feats), "--model", str(model), "--out", str(tmp_path / "x")]) == 0
    assert (tmp_path / "x/shap_summary.csv").read_text().startswith("feature,sum_abs_shap")
    assert main(["eval-surv", *common, "--features", str(feats), "--predictions", str(tmp_path / "p/predictions.csv"), "--out", str(tmp_path / "e")]) == 0
    ck = run / "seg/arch1/checkpoint.json"
    assert main(["predict-seg", *common, "--data", str(data), "--checkpoint", str(ck), "--patients", "PHT000,PHT001", "--out", str(tmp_path / "s")]) == 0
    assert main(["eval-seg", *common, "--data", str(data), "--pred", str(tmp_path / "s/masks"), "--arch", "1", "--out", str(tmp_path / "es")]) == 0
    assert len((tmp_path / "es/seg_patients.csv").read_text().splitlines()) == 4
    assert main(["resample", *common, "--input", str(data / "ct/PHT000.nii"), "--out", str(tmp_path / "r")]) == 0


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["phantom", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2


def test_bad_config_values(tmp_path):
    bad = tmp_path / "bad.toml"
    for text in ["[bogus]\nx=1\n", "[train]\nepochs = -1\n", "[gbt]\nseed = 3\n", "[run\n"]:
        bad.write_text(text)
        with pytest.raises(ConfigError):
            load_config(bad)
        assert main(["phantom", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_runtime_error_exit_1(tmp_path):
    assert main(["features", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1


def test_seed_override_changes_hash():
    a, b = load_config(None), load_config(None, seed=5)
    assert b["run"].seed == 5 and b["gbt"].seed == 5
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(load_config(None))


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "hnpipe", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "run-all" in out.stdout
