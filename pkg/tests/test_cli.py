import json
import os

import pytest

from binrobust import cli


def write_cfg(tmp_path, name, cfg):
    p = os.path.join(tmp_path, name)
    with open(p, "w") as f:
        json.dump(cfg, f)
    return p


BASE_DATASET = {"source": "synth", "num_classes": 3, "n": 60,
                "hw": [8, 8], "noise": 0.08, "seed": 0}
BASE_MODEL = {"architecture": "smallcnn", "width": 0.25, "num_classes": 3,
              "input_hw": [8, 8], "scheme": "bnn"}


def test_unknown_key_rejected(tmp_path):
    p = write_cfg(tmp_path, "c.json", {"dataset": BASE_DATASET,
                                       "bogus_key": 1})
    with pytest.raises(cli.ConfigFileError):
        cli.load_config(p)


def test_unknown_nested_key_rejected(tmp_path):
    cfg = {"dataset": dict(BASE_DATASET, shuffle=True)}
    p = write_cfg(tmp_path, "c.json", cfg)
    with pytest.raises(cli.ConfigFileError):
        cli.load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(cli.ConfigFileError):
        cli.load_config(os.path.join(tmp_path, "none.json"))


def test_seed_derivation():
    cfg = {"dataset": dict(BASE_DATASET), "train": {},
           "attacks": [{"method": "fgsm"}]}
    out = cli.apply_seed(cfg, 100)
    assert out["dataset"]["seed"] == 100
    assert out["train"]["seed"] == 101
    assert out["attacks"][0]["seed"] == 102


def test_train_then_attack_roundtrip(tmp_path):
    out = str(tmp_path / "art")
    train_cfg = write_cfg(tmp_path, "train.json", {
        "dataset": BASE_DATASET, "model": BASE_MODEL,
        "train": {"epochs": 2, "lr": 0.01, "batch_size": 32, "seed": 1},
        "output_dir": out})
    assert cli.main(["train", "--config", train_cfg]) == 0
    assert os.path.exists(os.path.join(out, "model.ckpt"))
    assert os.path.exists(os.path.join(out, "history.csv"))

    attack_cfg = write_cfg(tmp_path, "attack.json", {
        "dataset": dict(BASE_DATASET, n=12, seed=9, split="test"),
        "model": {"checkpoint": os.path.join(out, "model.ckpt")},
        "attacks": [{"method": "fgsm", "epsilon": 0.06}],
        "output_dir": out})
    assert cli.main(["attack", "--config", attack_cfg]) == 0
    report = json.load(open(os.path.join(out, "report.json")))
    assert "fgsm" in report["attacks"]
    assert 0 <= report["attacks"]["fgsm"]["acc_star"] <= 1
    assert "white" in report["rs"]

    # reruns are byte-identical at any worker count
    blob1 = open(os.path.join(out, "report.json"), "rb").read()
    assert cli.main(["attack", "--config", attack_cfg, "--workers", "3"]) == 0
    blob3 = open(os.path.join(out, "report.json"), "rb").read()
    assert blob1 == blob3


def test_curve_command(tmp_path):
    out = str(tmp_path / "art")
    train_cfg = write_cfg(tmp_path, "t.json", {
        "dataset": BASE_DATASET, "model": BASE_MODEL,
        "train": {"epochs": 2, "lr": 0.01, "batch_size": 32, "seed": 1},
        "output_dir": out})
    assert cli.main(["train", "--config", train_cfg]) == 0
    curve_cfg = write_cfg(tmp_path, "c.json", {
        "dataset": dict(BASE_DATASET, n=8, seed=9, split="test"),
        "model": {"checkpoint": os.path.join(out, "model.ckpt")},
        "attacks": [{"method": "fgsm"}],
        "eps_grid": [0.0, 0.06], "output_dir": out})
    assert cli.main(["curve", "--config", curve_cfg]) == 0
    lines = open(os.path.join(out, "curve_fgsm.csv")).read().splitlines()
    assert len(lines) == 3


def test_cam_command(tmp_path):
    out = str(tmp_path / "art")
    train_cfg = write_cfg(tmp_path, "t.json", {
        "dataset": BASE_DATASET, "model": BASE_MODEL,
        "train": {"epochs": 1, "lr": 0.01, "batch_size": 32, "seed": 1},
        "output_dir": out})
    assert cli.main(["train", "--config", train_cfg]) == 0
    cam_cfg = write_cfg(tmp_path, "cam.json", {
        "dataset": dict(BASE_DATASET, n=6, seed=9, split="test"),
        "model": {"checkpoint": os.path.join(out, "model.ckpt")},
        "cam_images": 4, "output_dir": out})
    assert cli.main(["cam", "--config", cam_cfg]) == 0
    assert os.path.exists(os.path.join(out, "cams.npy"))
    lines = open(os.path.join(out, "cam_concentration.csv")).read().splitlines()
    assert len(lines) == 5


def test_error_exit_code(tmp_path):
    p = write_cfg(tmp_path, "bad.json", {"dataset": BASE_DATASET,
                                         "zzz": True})
    assert cli.main(["train", "--config", p]) == 1


def test_command_requires_config():
    assert cli.main(["train"]) == 1
