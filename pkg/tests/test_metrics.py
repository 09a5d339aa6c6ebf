import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from sdconet.config import FilterConfig, DEFAULT_BETA, DEFAULT_GAMMA
from sdconet.data import size_bucket
from sdconet.errors import ShapeError
from sdconet.metrics import (AREA_RANGES, PSNR_CAP, EvalReport, compute_ap, detection_encoder_macs, flops_report,
                             measure_fps, psnr)
from sdconet.model import SDCoNet
from sdconet.query_filter import FilteredEncoder, FilterSchedule, attention_site_count


def gt(img, cls, bbox):
    return {"image_id": img, "class_id": cls, "bbox": list(bbox)}


def det(img, cls, bbox, score):
    return {"image_id": img, "class_id": cls, "bbox": list(bbox), "score": score}


class TestAP:
    def test_single_perfect_detection(self):
        g = [gt(0, 0, (10, 10, 20, 20))]
        r = compute_ap([det(0, 0, (10, 10, 20, 20), 0.9)], g)
        assert r.ap == 1.0 and r.ap50 == 1.0 and r.ap75 == 1.0

    def test_no_predictions(self):
        r = compute_ap([], [gt(0, 0, (10, 10, 20, 20))])
        assert r.ap == 0.0 and r.ap50 == 0.0

    def test_tp_then_fp(self):
        g = [gt(0, 0, (0, 0, 10, 10))]
        p = [det(0, 0, (0, 0, 10, 9), 0.9), det(0, 0, (50, 50, 10, 10), 0.8)]  # IoU 0.9, then a miss
        assert compute_ap(p, g).ap50 == 1.0

    def test_hand_evaluated_pr_curve(self):
        # TP(0.9), FP(0.8), TP(0.7) over 2 GTs: precision envelope 1.0 up to recall 0.5, 2/3 beyond.
        g = [gt(0, 0, (0, 0, 10, 10)), gt(0, 0, (40, 40, 10, 10))]
        p = [det(0, 0, (0, 0, 10, 10), 0.9), det(0, 0, (80, 0, 10, 10), 0.8), det(0, 0, (40, 40, 10, 10), 0.7)]
        expected = (51 * 1.0 + 50 * (2 / 3)) / 101
        assert compute_ap(p, g).ap50 == pytest.approx(expected, abs=1e-12)

    def test_class_without_gt_is_excluded(self):
        g = [gt(0, 0, (10, 10, 20, 20))]
        p = [det(0, 0, (10, 10, 20, 20), 0.9), det(0, 3, (60, 60, 10, 10), 0.95)]
        r = compute_ap(p, g)
        assert r.ap == 1.0 and set(r.per_class_ap) == {0}

    def test_empty_bucket_is_none(self):
        r = compute_ap([], [gt(0, 0, (0, 0, 10, 10))])
        assert r.ap_s == 0.0 and r.ap_m is None and r.ap_l is None
        assert "n/a" in r.table()

    def test_size_buckets(self):
        g = [gt(0, 0, (0, 0, 10, 10)), gt(0, 0, (100, 100, 50, 50)), gt(0, 0, (200, 200, 100, 100))]
        p = [det(0, 0, (0, 0, 10, 10), 0.9)]
        r = compute_ap(p, g)
        assert r.ap_s == 1.0 and r.ap_m == 0.0 and r.ap_l == 0.0

    def test_duplicate_detection_is_false_positive(self):
        g = [gt(0, 0, (0, 0, 10, 10))]
        p = [det(0, 0, (0, 0, 10, 10), 0.9), det(0, 0, (0, 0, 10, 10), 0.95)]
        assert compute_ap(p, g).ap50 == 1.0  # the lower-scored copy is the FP, after recall reached 1
        p = [det(0, 0, (0, 0, 10, 10), 0.9), det(0, 0, (60, 0, 10, 10), 0.95)]
        assert compute_ap(p, g).ap50 == pytest.approx(0.5)  # FP first: precision 1/2 at full recall

    def test_values_in_range_and_ap_le_ap50(self):
        rng = np.random.default_rng(0)
        g = [gt(i % 3, int(rng.integers(0, 2)), (*rng.uniform(0, 80, 2), *rng.uniform(5, 30, 2))) for i in range(12)]
        p = [det(x["image_id"], x["class_id"], np.array(x["bbox"]) + rng.normal(0, 2, 4), float(rng.random()))
             for x in g] + [det(0, 1, (5, 5, 10, 10), 0.99)]
        r = compute_ap(p, g)
        for v in (r.ap, r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l):
            assert v is None or 0.0 <= v <= 1.0
        assert r.ap <= r.ap50

    @staticmethod
    def _scene(seed):
        rng = np.random.default_rng(seed)
        cells = rng.permutation(16)[:int(rng.integers(2, 8))]
        gts = [gt(0, 0, (30 * (c % 4), 30 * (c // 4), 20, 20)) for c in cells]
        dets = []
        for g in gts:
            if rng.random() < 0.6:
                dets.append(det(0, 0, np.array(g["bbox"]) + rng.normal(0, 1.5, 4), float(rng.random())))
        for _ in range(int(rng.integers(0, 4))):  # misses in the empty right strip
            dets.append(det(0, 0, (130 + rng.uniform(0, 20), rng.uniform(0, 100), 10, 10), float(rng.random())))
        return gts, dets

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_top_scoring_tp_never_decreases_ap(self, seed):
        gts, dets = self._scene(seed)
        covered = {tuple(np.round(d["bbox"][:2], -1)) for d in dets}
        free = [g for g in gts if tuple(np.round(g["bbox"][:2], -1)) not in covered]
        if not free:
            return
        before = compute_ap(dets, gts)
        after = compute_ap(dets + [det(0, 0, free[0]["bbox"], 2.0)], gts)
        assert after.ap >= before.ap - 1e-12 and after.ap50 >= before.ap50 - 1e-12

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_lowest_scoring_fp_never_increases_ap50(self, seed):
        gts, dets = self._scene(seed)
        before = compute_ap(dets, gts).ap50
        after = compute_ap(dets + [det(0, 0, (145, 140, 5, 5), -1.0)], gts).ap50
        assert after <= before + 1e-12


class TestBuckets:
    @settings(max_examples=200, deadline=None)
    @given(area=st.floats(0.0, 1e6))
    def test_partition(self, area):
        hits = [name for name, (lo, hi) in AREA_RANGES.items() if name != "all" and lo <= area < hi]
        assert hits == [size_bucket(area)]

    def test_thresholds(self):
        assert size_bucket(32 ** 2 - 1) == "small" and size_bucket(32 ** 2) == "medium"
        assert size_bucket(96 ** 2) == "large"


class TestPSNR:
    def test_identical_is_cap(self):
        a = np.random.default_rng(0).random((4, 4, 3))
        assert psnr(a, a) == PSNR_CAP == 99.0

    def test_uniform_one_level(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-9)
        assert psnr(a, a + 1 / 255) == pytest.approx(48.13, abs=5e-3)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((5, 5, 3)), rng.random((5, 5, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_tensor_inputs(self):
        a = torch.rand(3, 4, 4)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_decreases_with_noise_amplitude(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((8, 8, 3))
        noise = rng.uniform(-1, 1, a.shape)
        vals = [psnr(a, a + amp * noise) for amp in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]


class TestFlops:
    def test_attention_ratio_equal_level_counts(self):
        sched = FilterSchedule(DEFAULT_BETA, DEFAULT_GAMMA)
        base = attention_site_count(FilterSchedule.unfiltered(), [1000] * 4)
        joint = attention_site_count(sched, [1000] * 4)
        a0, _ = detection_encoder_macs([base.sites_baseline // 32 // 6] * 6, base.per_layer_filtered, 4000,
                                       64, 4, 8, 4, 256)
        a1, _ = detection_encoder_macs([0] * 6, joint.per_layer_filtered, 4000, 64, 4, 8, 4, 256)
        assert a1 / a0 == pytest.approx(0.51, rel=1e-2)

    def test_report_ratio_matches_site_ratio(self):
        cfg = tiny_config()
        rep = flops_report(cfg, (64, 64))
        v = rep.variants
        assert v["joint_filtering"]["attention_ratio"] == pytest.approx(
            v["joint_filtering"]["attention_sites"] / v["no_filtering"]["attention_sites"])
        assert list(v) == ["no_filtering", "layer_filtering", "scale_filtering", "joint_filtering"]
        assert v["joint_filtering"]["total_g"] < v["no_filtering"]["total_g"]
        assert rep.flops_g == v["joint_filtering"]["total_g"]

    def test_doubling_side_quadruples_token_linear_terms(self):
        cfg = tiny_config()
        small, big = flops_report(cfg, (64, 64)), flops_report(cfg, (128, 128))
        for key in ("encoder.stem", "detector.input_proj", "detector.saliency"):
            assert big.breakdown[key] == 4 * small.breakdown[key]
        assert big.variants["no_filtering"]["attention_sites"] == 4 * small.variants["no_filtering"]["attention_sites"]

    def test_all_ones_schedule_collapses_rows(self):
        cfg = tiny_config()
        cfg.filter = FilterConfig(beta=[1.0] * 4, gamma=[1.0] * 6)
        v = flops_report(cfg, (64, 64)).variants
        assert len({(r["attention_sites"], r["total_g"]) for r in v.values()}) == 1

    def test_two_level_two_layer_brute_force_counter(self):
        sched = FilterSchedule((0.6, 1.0), (1.0, 0.5))
        shapes = [(6, 6), (3, 3)]
        n = 45
        d, heads, points = 16, 2, 3
        enc = FilteredEncoder(d, 2, heads, points, 32, sched, max_rows=8, max_cols=8)
        for layer in enc.layers:
            layer.self_attn.count_sites = True
        enc(torch.randn(1, n, d), torch.randn(1, n, d), torch.rand(1, n, 2, 2), shapes, torch.randn(1, n))
        measured = [layer.self_attn.site_count for layer in enc.layers]
        acct = attention_site_count(sched, [36, 9], heads=heads, points=points)
        assert measured == acct.per_layer_filtered
        attn, _ = detection_encoder_macs([m // (heads * points) for m in measured], measured, n, d, 2, heads,
                                         points, 32)
        assert attn == sum(measured) * 2 * (d // heads)

    def test_full_model_sites_match_report(self):
        cfg = tiny_config()
        model = SDCoNet(cfg).eval()
        for layer in model.detector.encoder.layers:
            layer.self_attn.count_sites = True
        with torch.no_grad():
            model(torch.rand(1, 64, 64, 3), with_sr=False)
        measured = sum(layer.self_attn.site_count for layer in model.detector.encoder.layers)
        assert measured == flops_report(cfg, (64, 64)).variants["joint_filtering"]["attention_sites"]

    def test_json_and_table_agree(self):
        rep = flops_report(tiny_config(), (64, 64))
        table = rep.table().splitlines()
        assert len(table) == 5
        for line, (name, v) in zip(table[1:], rep.variants.items()):
            cols = line.split()
            assert cols[0] == name and int(cols[1]) == v["attention_sites"]
            assert float(cols[3]) == pytest.approx(v["total_g"], abs=1e-6)


class TestReport:
    def test_fps_positive(self):
        assert measure_fps(lambda: sum(range(100)), warmup=1, runs=5) > 0

    def test_to_dict_keys(self):
        d = EvalReport(ap=0.5, per_class_ap={1: 0.5}).to_dict()
        assert d["per_class_ap"] == {"1": 0.5}
        assert {"ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "psnr_db", "fps", "flops_g"} <= set(d)
