import json
from pathlib import Path

import numpy as np
import pytest

from sdconet.cli import main
from sdconet.data import read_png

from conftest import tiny_config


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("SDCONET_CACHE", str(tmp_path / "cache"))
    cfg = tmp_path / "tiny.json"
    cfg.write_text(tiny_config().to_json())
    return tmp_path, str(cfg)


def _json_lines(text):
    return [json.loads(l) for l in text.splitlines() if l.startswith("{")]


def _error_line(err):
    line = [l for l in err.splitlines() if l.startswith("sdconet-error ")]
    assert len(line) == 1
    return json.loads(line[0][len("sdconet-error "):])


class TestSynthData:
    def test_same_seed_same_bytes(self, env, capsys):
        tmp, cfg = env
        for name in ("a", "b"):
            assert main(["synth-data", "--config", cfg, "--seed", "5", "--out-dir", str(tmp / name)]) == 0
        files = sorted(str(p.relative_to(tmp / "a")) for p in (tmp / "a").rglob("*") if p.is_file())
        assert "annotations.json" in files and "manifest.json" in files
        for f in files:
            assert (tmp / "a" / f).read_bytes() == (tmp / "b" / f).read_bytes()

    def test_count_zero(self, env, capsys):
        tmp, cfg = env
        assert main(["synth-data", "--config", cfg, "--count", "0", "--out-dir", str(tmp / "z")]) == 0
        assert _json_lines(capsys.readouterr().out)[-1]["images"] == 0
        assert json.loads((tmp / "z" / "annotations.json").read_text())["images"] == []

    def test_tiling(self, env, capsys):
        tmp, cfg = env
        assert main(["synth-data", "--config", cfg, "--count", "1", "--canvas", "96", "--tile-size", "32",
                     "--out-dir", str(tmp / "t")]) == 0
        assert _json_lines(capsys.readouterr().out)[-1]["images"] == 9

    def test_refuses_non_empty_out_dir(self, env, capsys):
        tmp, cfg = env
        (tmp / "d").mkdir()
        (tmp / "d" / "keep.txt").write_text("x")
        assert main(["synth-data", "--config", cfg, "--out-dir", str(tmp / "d")]) == 1
        assert "not empty" in _error_line(capsys.readouterr().err)["message"]
        assert main(["synth-data", "--config", cfg, "--out-dir", str(tmp / "d"), "--force"]) == 0

    def test_bad_config_reports_and_fails(self, env, capsys):
        tmp, _ = env
        (tmp / "bad.json").write_text('{"trainer": {"rho": 3}}')
        assert main(["synth-data", "--config", str(tmp / "bad.json"), "--out-dir", str(tmp / "o")]) == 1
        assert _error_line(capsys.readouterr().err)["type"] == "ConfigError"


class TestFlops:
    def test_table_and_json_agree(self, env, capsys):
        tmp, cfg = env
        assert main(["flops", "--config", cfg, "--input-size", "32", "32"]) == 0
        rows = capsys.readouterr().out.strip().splitlines()[1:]
        assert len(rows) == 4
        assert main(["flops", "--config", cfg, "--input-size", "32", "32", "--json", "--out-dir", str(tmp / "f")]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert json.loads((tmp / "f" / "flops.json").read_text()) == rep
        for row in rows:
            name, sites = row.split()[:2]
            assert int(sites) == int(rep["variants"][name]["attention_sites"])


def test_eval_missing_checkpoint(env, capsys):
    tmp, _ = env
    assert main(["eval", "--checkpoint", str(tmp / "nope.pt")]) == 2
    err = _error_line(capsys.readouterr().err)
    assert "nope.pt" in err["message"]


def test_train_missing_data_dir(env, capsys):
    tmp, cfg = env
    assert main(["train", "--config", cfg, "--data", str(tmp / "missing"), "--out-dir", str(tmp / "r")]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    # one tiny two-stage run shared by the checkpoint-consuming tests
    tmp = tmp_path_factory.mktemp("cli_train")
    mp = pytest.MonkeyPatch()
    mp.setenv("SDCONET_CACHE", str(tmp / "cache"))
    cfg = tmp / "tiny.json"
    cfg.write_text(tiny_config().to_json())
    yield tmp, str(cfg), mp
    mp.undo()


def test_train_then_resume_then_eval(trained, capsys):
    tmp, cfg, _ = trained
    run = tmp / "run"
    assert main(["train", "--config", cfg, "--out-dir", str(run)]) == 0
    out = capsys.readouterr().out
    assert out.count("stage 1 → stage 2 at epoch 2") == 1
    final = _json_lines(out)[-1]
    assert final["final"] is True and final["epoch"] == 3 and final["stage"] == 2
    assert (run / "final.pt").is_file()
    assert len((run / "metrics.ndjson").read_text().splitlines()) == 3

    # resume from epoch 2 continues numbering at 3 and appends
    resumed = tmp / "resumed"
    resumed.mkdir()
    (resumed / "checkpoints").mkdir()
    ckpt = resumed / "checkpoints" / "epoch_002.pt"
    ckpt.write_bytes((run / "checkpoints" / "epoch_002.pt").read_bytes())
    assert main(["train", "--config", cfg, "--resume", str(ckpt)]) == 0
    out = capsys.readouterr().out
    epochs = [e["epoch"] for e in _json_lines(out) if "epoch" in e and "final" not in e]
    assert epochs == [3]
    assert (resumed / "final.pt").is_file()

    reports = []
    for _ in range(2):
        assert main(["eval", "--checkpoint", str(run / "final.pt")]) == 0
        reports.append(_json_lines(capsys.readouterr().out)[-1])
    assert reports[0] == reports[1]
    for k in ("ap", "ap50", "ap75", "psnr_db", "psnr_bicubic_db"):
        assert k in reports[0]


def test_visualize_saliency(trained, capsys):
    tmp, cfg, _ = trained
    ckpt = tmp / "run" / "final.pt"
    if not ckpt.is_file():
        assert main(["train", "--config", cfg, "--out-dir", str(tmp / "run")]) == 0
    assert main(["synth-data", "--config", cfg, "--count", "1", "--out-dir", str(tmp / "img")]) == 0
    capsys.readouterr()
    image = next((tmp / "img").rglob("*.png"))
    sides = []
    for name in ("v1", "v2"):
        assert main(["visualize-saliency", "--checkpoint", str(ckpt), "--image", str(image),
                     "--out-dir", str(tmp / name)]) == 0
        sides.append(json.loads((tmp / name / "saliency.json").read_text()))
    capsys.readouterr()
    levels = sides[0]["levels"]
    assert len(levels) == 4
    for lv in levels:
        assert 0.0 <= lv["min"] <= lv["mean"] <= lv["max"] <= 1.0
        a = read_png(tmp / "v1" / lv["file"])
        assert a.shape[:2] == tuple(lv["shape"])
        assert np.array_equal(a, read_png(tmp / "v2" / lv["file"]))
    assert sides[0]["levels"] == sides[1]["levels"]


def test_visualize_missing_image(trained, capsys):
    tmp, _, _ = trained
    ckpt = tmp / "run" / "final.pt"
    if not ckpt.is_file():
        pytest.skip("depends on the training test")
    assert main(["visualize-saliency", "--checkpoint", str(ckpt), "--image", str(tmp / "none.png")]) == 2
