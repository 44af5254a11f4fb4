import json

import numpy as np
import pytest

from mffaseg.cli import main
from mffaseg.dataio import load_manifest, read_pgm_mask, read_ppm, write_pgm_mask, write_ppm

TOY = {"videos": 2, "frames": 24, "frame_size": 32, "folds": 2}
TRAIN = {"epochs": 2, "batch_size": 2, "channels": 8, "base_channels": 4, "decoder_channels": 4,
         "seq_len": 2, "train_folds": [0], "eval_folds": [1]}


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-toydata", "--config", write_json(root / "toy.json", TOY), "--seed", "3",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--config", write_json(root / "train.json", TRAIN), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_unknown_flag_exits_1(capsys):
    assert main(["gradcheck", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command_exits_1():
    assert main(["frobnicate"]) == 1


def test_gradcheck_passes():
    assert main(["gradcheck"]) == 0


def test_synth_writes_n_pairs(tmp_path):
    frame = np.random.default_rng(0).integers(0, 256, (48, 48, 3)).astype(np.uint8)
    mask = np.zeros((48, 48), np.uint8)
    mask[20:28, 14:34] = 1
    write_ppm(tmp_path / "f.ppm", frame)
    write_pgm_mask(tmp_path / "m.pgm", mask)
    out = tmp_path / "seq"
    assert main(["synth", "--in", str(tmp_path / "f.ppm"), "--mask", str(tmp_path / "m.pgm"),
                 "--n", "4", "--seed", "1", "--out", str(out)]) == 0
    assert len(list(out.glob("*.ppm"))) == 4 and len(list(out.glob("*.pgm"))) == 4
    manifest = load_manifest(out)
    assert manifest.videos[0].labeled_indices == [0, 1, 2, 3]
    np.testing.assert_array_equal(read_ppm(out / "00001.ppm"), frame)


def test_synth_empty_mask_is_validation_error(tmp_path):
    write_ppm(tmp_path / "f.ppm", np.zeros((8, 8, 3), np.uint8))
    write_pgm_mask(tmp_path / "m.pgm", np.zeros((8, 8), np.uint8))
    assert main(["synth", "--in", str(tmp_path / "f.ppm"), "--mask", str(tmp_path / "m.pgm"),
                 "--out", str(tmp_path / "o")]) == 1


def test_missing_input_is_validation_error(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.mffa"), "--data", str(tmp_path),
                 "--report", str(tmp_path / "r.json")]) == 1


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "last.mffa").is_file() and (run / "epoch001.mffa").is_file()
    assert len((run / "loss_log.jsonl").read_text().splitlines()) == 2


def test_eval_report_consistent(workspace, tmp_path):
    report = tmp_path / "report.json"
    assert main(["eval", "--ckpt", str(workspace / "run/last.mffa"), "--data", str(workspace / "data"),
                 "--report", str(report), "--overlays", str(tmp_path / "ov")]) == 0
    d = json.loads(report.read_text())
    assert abs(d["overall"]["mdsc"] - np.mean([f["dsc"] for f in d["frames"]])) < 1e-9
    assert d["flops"]["encoder"] > 0
    assert len(list((tmp_path / "ov").glob("*.ppm"))) == len(d["frames"])


def test_infer_writes_masks(workspace, tmp_path):
    frames = workspace / "data/video01/frames"
    assert main(["infer", "--ckpt", str(workspace / "run/last.mffa"), "--frames", str(frames),
                 "--out", str(tmp_path)]) == 0
    masks = sorted(tmp_path.glob("*.pgm"))
    assert len(masks) == len(list(frames.glob("*.ppm")))
    assert read_pgm_mask(masks[0]).shape == (32, 32)


def test_bad_config_is_validation_error(tmp_path, workspace):
    assert main(["train", "--config", write_json(tmp_path / "c.json", {"epochs": 0}),
                 "--data", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 1
