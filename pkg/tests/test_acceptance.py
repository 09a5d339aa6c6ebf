"""One PASS/FAIL line per acceptance criterion, each backed by an independent oracle."""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import test_detection
import test_encoder
import test_query_filter
import test_saliency
import test_sr_decoder
import test_trainer
from conftest import tiny_config
from sdconet.config import DEFAULT_BETA, DEFAULT_GAMMA, RunConfig, swin_t_preset
from sdconet.data import bicubic_upsample_torch, collate, synthesize
from sdconet.detection import brute_force_match, giou, hungarian_match
from sdconet.encoder import SharedEncoder
from sdconet.metrics import flops_report, psnr
from sdconet.query_filter import FilterSchedule, attention_site_count
from sdconet.saliency import LevelGeometry, confidence_target
from sdconet.trainer import evaluate_detection, train

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"


@pytest.fixture
def criterion(capsys):
    """Run a criterion body under a time budget and print its verdict whatever the outcome."""
    def run(number, title, budget_s, body):
        t0 = time.perf_counter()
        detail, ok = "", False
        try:
            detail = body() or ""
            elapsed = time.perf_counter() - t0
            ok = elapsed < budget_s
            if not ok:
                detail = f"{detail} over budget".strip()
        except Exception as e:  # report, then re-raise for pytest
            elapsed = time.perf_counter() - t0
            detail = f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"
            raise
        finally:
            with capsys.disabled():
                verdict = "PASS" if ok else "FAIL"
                print(f"\n{verdict} criterion {number} {title} ({elapsed:.2f}s / {budget_s:g}s) {detail}")
        assert ok, detail
    return run


def test_criterion_1_filtering_efficiency(criterion):
    def body():
        sched = FilterSchedule(DEFAULT_BETA, DEFAULT_GAMMA)
        worst = 0.0
        for n in (1000, 1024, 4096, 10000):
            worst = max(worst, abs(attention_site_count(sched, [n] * 4).joint_ratio - 0.51) / 0.51)
        assert worst < 0.01
        # independent closed form: mean of beta_l * gamma_t over the level x layer grid
        closed = sum(b * g for b in DEFAULT_BETA for g in DEFAULT_GAMMA) / (len(DEFAULT_BETA) * len(DEFAULT_GAMMA))
        assert math.isclose(closed, 0.51, abs_tol=1e-12)
        rep = flops_report(RunConfig(encoder=swin_t_preset()), (400, 400))
        ratio = rep.variants["joint_filtering"]["attention_ratio"]
        total = rep.variants["joint_filtering"]["total_g"] / rep.variants["no_filtering"]["total_g"]
        assert total > ratio  # filtering only touches the encoder, so the whole-model ratio is milder
        return f"site ratio dev {worst:.4%}; swin-t@400 attention {ratio:.3f}, total {total:.3f}"
    criterion(1, "filtering-efficiency arithmetic", 1.0, body)


def test_criterion_2_gaussian_target_suite(criterion):
    def body():
        geom = LevelGeometry(10, 10, 10, (100, 100))
        c = confidence_target([test_saliency.box(0.45, 0.45, 0.4, 0.4)], geom, sigma=1 / 3).C
        spot = float(c[4, 5])
        assert abs(spot - math.exp(-1.125)) < 1e-9
        t = test_saliency.TestConfidenceTarget()
        t.test_center_is_one()
        t.test_outside_is_zero()
        t.test_stronger_slope_near_center()
        law = type(t).test_support_range_and_monotonicity.hypothesis.inner_test
        for cx, cy, w, h in [(0.5, 0.5, 0.4, 0.4), (0.2, 0.7, 0.15, 0.3), (0.9, 0.1, 0.2, 0.2), (0.33, 0.5, 0.6, 0.05)]:
            law(t, cx, cy, w, h)
        return f"spot {spot:.12f}"
    criterion(2, "centrality target suite", 1.0, body)


def test_criterion_3_filter_oracles(criterion):
    def body():
        test_query_filter.TestFilteredEncoder().test_all_ones_schedule_reproduces_unfiltered()
        test_query_filter.TestSelectActive().test_matches_brute_force_200_vectors()
        return "20 bit-exact inputs, 200 top-k vectors"
    criterion(3, "filter oracle equivalence", 10.0, body)


def test_criterion_4_routing_suite(criterion, tmp_path):
    def body():
        samples = synthesize(tiny_config().data, 0, tiny_config().detector.num_classes)
        r = test_trainer.TestRouting()
        r.test_sr_lr_arithmetic()
        r.test_milestone_decay()
        law = type(r).test_routing_and_lr_laws.hypothesis.inner_test
        for t_det, extra, rho, milestones, eta in [(0, 1, 0.1, [], 1e-4), (2, 4, 0.5, [1, 4], 1e-3),
                                                   (16, 20, 0.99, [30], 1e-4), (3, 3, 0.01, [2, 2, 5], 5e-6)]:
            law(r, t_det, extra, rho, milestones, eta)
        test_trainer.TestTrain().test_two_epoch_freeze_single_transition_and_artifacts(samples, tmp_path)
        return "sr frozen 2 epochs, one transition at epoch 3, sr/det == rho"
    criterion(4, "two-stage routing suite", 60.0, body)


def test_criterion_5_gradient_checks(criterion):
    def body():
        test_sr_decoder.TestResidualBlock().test_finite_difference_gradient()
        torch.manual_seed(0)
        test_saliency.TestPropagate().test_alpha_gradient_matches_finite_difference()
        test_trainer.TestJointLossGradient().test_finite_difference_on_4x4_pyramid()
        return "residual block, alpha, joint loss at rel 1e-3"
    criterion(5, "finite-difference gradient checks", 30.0, body)


def test_criterion_6_loss_and_matching_oracles(criterion):
    def body():
        assert abs(giou([0, 0, 1, 1], [2, 0, 3, 1]) + 1 / 3) < 1e-9
        assert abs(giou([0, 0, 2, 2], [1, 1, 3, 3]) + 5 / 63) < 1e-9
        rng = np.random.default_rng(0)
        for _ in range(500):
            ng = int(rng.integers(1, 6))
            cost = rng.random((int(rng.integers(ng, 8)), ng))
            assert abs(hungarian_match(cost).total_cost - brute_force_match(cost)) < 1e-12
        test_detection.TestFocal().test_binary_textbook_form()
        return "GIoU hand cases, 500 exhaustive matches"
    criterion(6, "loss and matching oracles", 10.0, body)


@pytest.mark.slow
def test_criterion_7_overfit_smoke(criterion):
    def body():
        cfg = RunConfig.load(SMOKE_CONFIG)
        assert cfg.data.count == 8 and (cfg.trainer.T_det, cfg.trainer.T_tot) == (2, 6)
        torch.manual_seed(cfg.seed)
        samples = synthesize(cfg.data, cfg.seed, cfg.detector.num_classes)
        res = train(cfg, samples)
        hist = res.state.history
        initial = hist[0]["losses_first_step"]["total"]
        assert hist[-1]["losses"]["total"] < 0.25 * initial
        model = res.model.eval()
        _, rep = evaluate_detection(model, samples)
        b = collate(samples)
        with torch.no_grad():
            sr = model(b["lr"]).sr
        p_sr, p_bic = psnr(sr, b["hr"]), psnr(bicubic_upsample_torch(b["lr"]), b["hr"])
        detail = f"AP50 {rep.ap50:.3f}, PSNR {p_sr:.2f} dB vs bicubic {p_bic:.2f} dB"
        assert rep.ap50 > 0.9, detail
        assert p_sr >= p_bic + 0.5, detail
        return detail
    criterion(7, "end-to-end overfit smoke", 3600.0, body)


def test_criterion_8_shape_laws(criterion):
    def body():
        cfg = swin_t_preset()
        pyr = SharedEncoder(cfg)(torch.rand(1, 256, 200, 3))
        assert pyr.spatial_shapes == [(math.ceil(256 / 2 ** (s + 1)), math.ceil(200 / 2 ** (s + 1)))
                                      for s in (1, 2, 3, 4)]
        assert [f.shape[-1] for f in pyr.levels] == [96, 192, 384, 768]
        d = test_sr_decoder.TestDecode()
        d.test_doubles_resolution()
        for hw in [(30, 22), (17, 9), (4, 4)]:
            d.test_padded_inputs_exactly_doubled(hw)
        law = test_encoder.TestEncode.test_spatial_and_channel_law.hypothesis.inner_test
        for h, w in [(1, 1), (7, 70), (33, 17), (64, 64)]:
            law(test_encoder.TestEncode(), h, w)
        return "levels 64x50..8x7 at 96..768, SR exactly 2x"
    criterion(8, "shape-law suite", 10.0, body)
