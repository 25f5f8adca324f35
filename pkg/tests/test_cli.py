"""End-to-end CLI coverage on synthetic data."""

import numpy as np
import pytest

from extd import fileio
from extd.cli import cli
from extd.model import ModelConfig, build_model

TINY_CFG_TEXT = """\
variant = fpn
width = 8
depth = 2
activation = prelu
levels = 3
expansion = 1,2
seed = 0
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG_TEXT, encoding="utf-8")
    return path


@pytest.fixture
def tiny_weights(tmp_path, tiny_config):
    cfg, seed = fileio.load_config(tiny_config)
    params = build_model(cfg, seed)
    path = tmp_path / "tiny.extd"
    fileio.save_weights(path, params)
    return path


def test_usage_errors_exit_1(capsys):
    assert cli(["unknown-command"]) == 1
    assert cli(["summarize", "--config", "x.cfg", "--bogus-flag"]) == 1
    assert cli([]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    missing = cli(["summarize", "--config", str(tmp_path / "nope.cfg")])
    assert missing == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 3\n", encoding="utf-8")
    assert cli(["summarize", "--config", str(bad)]) == 2


def test_summarize_matches_library(tiny_config, capsys):
    assert cli(["summarize", "--config", str(tiny_config),
                "--input-size", "64"]) == 0
    out = capsys.readouterr().out
    from extd.costs import count_madds
    cfg, _ = fileio.load_config(tiny_config)
    report = count_madds(cfg, 64, 64)
    assert str(report.total_madds) in out
    assert str(report.total_params) in out


def test_synth_then_train_then_detect_then_eval(tmp_path, tiny_config, capsys):
    data = tmp_path / "data"
    assert cli(["synth", "--out", str(data), "--count", "4",
                "--resolution", "64", "--seed", "5"]) == 0
    weights = tmp_path / "model.extd"
    assert cli(["train", "--config", str(tiny_config),
                "--data", str(data / "annotations.txt"),
                "--out", str(weights), "--iters", "4",
                "--seed", "1", "--resolution", "64"]) == 0
    assert weights.exists()
    assert weights.with_suffix(".trace").exists()
    trace_lines = weights.with_suffix(".trace").read_text().splitlines()
    assert len(trace_lines) == 4
    assert trace_lines[0].split()[0] == "1"

    out_file = tmp_path / "dets.txt"
    image = data / "img00000.ppm"
    assert cli(["detect", "--config", str(tiny_config),
                "--weights", str(weights), "--image", str(image),
                "--conf", "0.3", "--out", str(out_file)]) == 0
    parsed = fileio.parse_detections(out_file.read_text(encoding="utf-8"))
    assert parsed[0][0] == "img00000.ppm"

    # eval against the generator's own annotations for that image
    gt_file = tmp_path / "gt.txt"
    ann = fileio.parse_annotations(
        (data / "annotations.txt").read_text(encoding="utf-8"))
    gt_file.write_text(fileio.format_annotations(
        fileio.DatasetIndex([ann.entries[0]])), encoding="utf-8")
    assert cli(["eval", "--pred", str(out_file), "--gt", str(gt_file)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].startswith("AP ")


def test_eval_perfect_predictions_prints_ap_1(tmp_path, capsys):
    gt_file = tmp_path / "gt.txt"
    gt_file.write_text("a.ppm\n1\n10 10 20 20\n", encoding="utf-8")
    pred_file = tmp_path / "pred.txt"
    pred_file.write_text("a.ppm\n1\n10.0000 10.0000 20.0000 20.0000 1.0000\n",
                         encoding="utf-8")
    assert cli(["eval", "--pred", str(pred_file), "--gt", str(gt_file)]) == 0
    assert "AP 1.0000" in capsys.readouterr().out


def test_detect_small_image_pads(tmp_path, tiny_config, tiny_weights, capsys):
    img = tmp_path / "small.ppm"
    fileio.save_pbm(img, np.full((3, 10, 10), 0.5, dtype=np.float32))
    out_file = tmp_path / "out.txt"
    assert cli(["detect", "--config", str(tiny_config),
                "--weights", str(tiny_weights), "--image", str(img),
                "--out", str(out_file)]) == 0
    for _, dets in fileio.parse_detections(out_file.read_text(encoding="utf-8")):
        for d in dets:
            assert d.box[0] + d.box[2] <= 10 + 1e-6


def test_gradcheck_cli(capsys):
    assert cli(["gradcheck", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].startswith("MAX ")


def test_bench_cli(tmp_path, tiny_config, tiny_weights, capsys):
    assert cli(["bench", "--config", str(tiny_config),
                "--weights", str(tiny_weights), "--sizes", "32,64",
                "--trials", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert lines[0].split()[0] == "32"
