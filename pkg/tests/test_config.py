import json

import pytest

from sdconet.config import CONFIG_VERSION, DEFAULT_BETA, DEFAULT_GAMMA, RunConfig, full_trainer_preset, swin_t_preset
from sdconet.errors import ConfigError


def test_defaults_are_valid_and_explicit():
    cfg = RunConfig().validate()
    d = cfg.to_dict()
    assert set(d) == {"config_version", "seed", "encoder", "decoder_sr", "saliency", "filter", "detector",
                      "trainer", "data", "eval"}
    assert d["config_version"] == CONFIG_VERSION
    assert tuple(d["filter"]["beta"]) == DEFAULT_BETA and tuple(d["filter"]["gamma"]) == DEFAULT_GAMMA
    t = d["trainer"]
    assert (t["T_det"], t["T_tot"], t["milestones"], t["rho"], t["clip_norm"]) == (2, 6, [4], 0.1, 0.1)
    assert (t["backbone_lr_mult"], t["weight_decay"], t["lr_decay"]) == (0.1, 1e-4, 0.1)
    w = d["detector"]
    assert (w["weight_cls"], w["weight_bbox"], w["weight_giou"], w["weight_sa"], w["weight_sr"]) == (1, 5, 2, 1, 1)
    assert d["saliency"]["sigma"] == pytest.approx(1 / 3)


def test_json_roundtrip(tmp_path):
    cfg = RunConfig(seed=11)
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert RunConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()


def test_partial_document_fills_defaults():
    cfg = RunConfig.from_dict({"trainer": {"rho": 0.5}, "seed": 3})
    assert cfg.trainer.rho == 0.5 and cfg.seed == 3 and cfg.trainer.T_det == 2


@pytest.mark.parametrize("doc,msg", [
    ({"bogus": 1}, "unknown key 'bogus'"),
    ({"trainer": {"rhoo": 0.5}}, "unknown key trainer.rhoo"),
    ({"config_version": 99}, "config_version 99 unsupported"),
    ({"trainer": {"rho": 1.0}}, "rho must lie in"),
    ({"trainer": {"T_det": 6, "T_tot": 6}}, "T_det < T_tot"),
    ({"filter": {"beta": [0.6, 0.0, 1.0, 1.0]}}, "filter.beta"),
    ({"trainer": {"rho": "high"}}, "wrongly typed"),
    ({"trainer": 3}, "must be an object"),
])
def test_rejections(doc, msg):
    with pytest.raises(ConfigError, match=msg):
        RunConfig.from_dict(doc)


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as e:
        RunConfig.from_dict({"bogus": 1, "trainer": {"rho": 2.0}})
    assert "bogus" in str(e.value) and "rho" in str(e.value)


def test_invalid_json_file(tmp_path):
    (tmp_path / "c.json").write_text("{\n  \"seed\": ,\n}")
    with pytest.raises(ConfigError, match="line 2"):
        RunConfig.load(tmp_path / "c.json")


def test_presets():
    assert swin_t_preset().stage_channels == [96, 192, 384, 768]
    p = full_trainer_preset()
    assert (p.T_det, p.milestones) == (16, [30])


def test_shipped_smoke_config_is_valid():
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"
    cfg = RunConfig.load(path)
    assert cfg.data.count == 8 and (cfg.trainer.T_det, cfg.trainer.T_tot) == (2, 6)
    assert json.loads(path.read_text())["config_version"] == CONFIG_VERSION
