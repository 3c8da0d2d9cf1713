import json
import subprocess
import sys

import numpy as np
import pytest

from stndet.cli import main
from stndet.config import TrainConfig
from stndet.data_io import read_image, synth_dataset, write_dataset, write_image, write_pnm

TINY = dict(image_size=32, synth_train=4, synth_test=4, batch_size=2, max_epochs=2, early_stop_patience=2,
            stn_pool_size=8)


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.json"
    TrainConfig(**TINY).save(path)
    return path


@pytest.fixture
def trained(tmp_path, cfg_path, capsys):
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "run")]) == 0
    return json.loads(capsys.readouterr().out.splitlines()[-1])


def err_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_unknown_flag_rejected(capsys):
    assert main(["train", "--config", "x.json", "--epochs", "3"]) == 2
    e = err_json(capsys)
    assert e["error"] == "usage" and "--epochs" in e["message"]


def test_missing_command_and_bad_choice(capsys):
    assert main([]) == 2
    assert err_json(capsys)["error"] == "usage"
    assert main(["explain", "--image", "a", "--checkpoint", "b", "--out", "c", "--layer", "p9"]) == 2


def test_runtime_errors_are_json(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert err_json(capsys)["error"] == "FileNotFoundError"
    bad = tmp_path / "bad.json"
    bad.write_text('{"lr": 0.1, "momentum": 0.9}')
    assert main(["train", "--config", str(bad)]) == 1
    e = err_json(capsys)
    assert e["error"] == "ConfigError" and "momentum" in e["message"]


def test_help_exits_zero():
    for cmd in ([], ["train"], ["eval"], ["compare"], ["fuse-bands"], ["explain"]):
        r = subprocess.run([sys.executable, "-m", "stndet.cli", *cmd, "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "usage" in r.stdout


def test_train_creates_checkpoint_and_record(tmp_path, trained):
    assert (tmp_path / "run" / "best.ckpt").exists() and (tmp_path / "run" / "last.ckpt").exists()
    lines = (tmp_path / "run" / "record.jsonl").read_text().splitlines()
    assert [json.loads(l)["type"] for l in lines] == ["header", "epoch", "epoch", "summary"]
    assert trained["stop_reason"] == "max_epochs"


def test_train_uses_output_root(tmp_path, cfg_path, monkeypatch, capsys):
    monkeypatch.setenv("STNDET_OUTPUT_ROOT", str(tmp_path / "outputs"))
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "outputs" / "train" / "best.ckpt").exists()


def test_eval_echoes_augment(tmp_path, trained, capsys):
    out = tmp_path / "report.json"
    assert main(["eval", "--checkpoint", trained["checkpoint"], "--augment", "rotation", "--augment-seed", "3",
                 "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["augment"] == {"rotation_deg": [-10.0, 10.0], "shear_h_deg": None, "shear_v_deg": None,
                                 "crop_zoom": None, "seed": 3, "min_visible": 0.1}
    assert "mAP@0.5" in capsys.readouterr().out


def test_eval_on_dataset_root(tmp_path, trained):
    write_dataset(synth_dataset(5, 2, 32), tmp_path / "data", "valid")
    out = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", trained["checkpoint"], "--data-root", str(tmp_path / "data"),
                 "--split", "valid", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["augment"] is None


def test_compare_twice_identical(tmp_path, cfg_path, capsys):
    outs = []
    for d in ("a", "b"):
        assert main(["compare", "--config", str(cfg_path), "--runs", "3", "--seed", "7",
                     "--out", str(tmp_path / d)]) == 0
        outs.append((tmp_path / d / "compare.txt").read_text())
    assert outs[0] == outs[1]
    assert len(outs[0].splitlines()) == 11
    data = json.loads((tmp_path / "a" / "compare.json").read_text())
    assert data["n_runs"] == 3 and data["seed"] == 7
    assert all(len(r["runs"]["stn"]["map50"]) == 3 for r in data["rows"])


def test_compare_with_checkpoints(tmp_path, cfg_path, trained):
    ck = trained["checkpoint"]
    assert main(["compare", "--config", str(cfg_path), "--runs", "1", "--baseline-ckpt", ck, "--stn-ckpt", ck,
                 "--out", str(tmp_path / "c")]) == 0
    rows = json.loads((tmp_path / "c" / "compare.json").read_text())["rows"]
    assert all(r["runs"]["baseline"] == r["runs"]["stn"] for r in rows)


def test_fuse_bands(tmp_path, capsys):
    rng = np.random.default_rng(0)
    paths = {}
    for b in ("green", "red", "rededge", "nir"):
        paths[b] = tmp_path / f"{b}.pgm"
        write_pnm(paths[b], rng.integers(0, 256, (6, 8)).astype(np.uint8))
    args = ["fuse-bands", "--green", str(paths["green"]), "--red", str(paths["red"]), "--rededge",
            str(paths["rededge"]), "--nir", str(paths["nir"])]
    assert main(args + ["--out", str(tmp_path / "rgb.png")]) == 0
    img = read_image(tmp_path / "rgb.png")
    assert img.shape == (3, 6, 8) and img.min() == 0.0 and img.max() == 1.0
    assert main(args + ["--cache-dir", str(tmp_path / "cache")]) == 0
    cached = json.loads(capsys.readouterr().out.splitlines()[-1])["image"]
    assert np.array_equal(read_image(cached), img)
    assert main(args) == 2


def test_fuse_bands_missing_file(tmp_path, capsys):
    assert main(["fuse-bands", "--green", "g.pgm", "--red", "r.pgm", "--rededge", "e.pgm",
                 "--out", str(tmp_path / "x.png")]) == 1
    assert err_json(capsys)["error"] == "FileNotFoundError"


def test_explain(tmp_path, trained, capsys):
    write_image(tmp_path / "in.png", synth_dataset(0, 1, 32)[0].image)
    out = tmp_path / "cam.png"
    assert main(["explain", "--image", str(tmp_path / "in.png"), "--checkpoint", trained["checkpoint"],
                 "--layer", "stride16", "--out", str(out)]) == 0
    res = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert res["layer"] == "stride16" and read_image(out).shape == (3, 32, 32)
