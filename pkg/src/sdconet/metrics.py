"""AP family, PSNR, analytic multiply-accumulate accounting and throughput."""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import MEDIUM_AREA, SMALL_AREA
from .encoder import expected_level_dims
from .errors import ShapeError
from .query_filter import FilterSchedule, attention_site_count

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, SMALL_AREA),
    "medium": (SMALL_AREA, MEDIUM_AREA),
    "large": (MEDIUM_AREA, math.inf),
}
PSNR_CAP = 99.0


@dataclass
class EvalReport:
    ap: Optional[float] = None
    ap50: Optional[float] = None
    ap75: Optional[float] = None
    ap_s: Optional[float] = None
    ap_m: Optional[float] = None
    ap_l: Optional[float] = None
    psnr_db: Optional[float] = None
    psnr_bicubic_db: Optional[float] = None
    fps: Optional[float] = None
    flops_g: Optional[float] = None
    per_class_ap: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d

    def table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "per_class_ap"]
        rows += [(f"ap[class {k}]", v) for k, v in self.per_class_ap.items()]
        return "\n".join(f"{k:<16} {'n/a' if v is None else f'{v:.4f}'}" for k, v in rows)


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def _iou_xywh(d: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(D, G) IoU for [x, y, w, h] boxes."""
    if len(d) == 0 or len(g) == 0:
        return np.zeros((len(d), len(g)))
    dx1, dy1 = d[:, 0] + d[:, 2], d[:, 1] + d[:, 3]
    gx1, gy1 = g[:, 0] + g[:, 2], g[:, 1] + g[:, 3]
    iw = np.clip(np.minimum(dx1[:, None], gx1[None]) - np.maximum(d[:, None, 0], g[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(dy1[:, None], gy1[None]) - np.maximum(d[:, None, 1], g[None, :, 1]), 0, None)
    inter = iw * ih
    union = (d[:, 2] * d[:, 3])[:, None] + (g[:, 2] * g[:, 3])[None] - inter
    return inter / union


def _match_image(dets: list[dict], gts: list[dict], thr: float, area_rng: tuple[float, float]):
    """Greedy score-ordered one-to-one matching; returns (scores, tp, ignored) per detection and #GTs."""
    g_area = np.array([g["bbox"][2] * g["bbox"][3] for g in gts])
    g_ign = (g_area < area_rng[0]) | (g_area >= area_rng[1]) if len(gts) else np.zeros(0, bool)
    order_g = np.argsort(g_ign, kind="mergesort")  # non-ignored first
    gts_sorted = [gts[i] for i in order_g]
    g_ign = g_ign[order_g]
    ious = _iou_xywh(np.array([d["bbox"] for d in dets]).reshape(-1, 4),
                     np.array([g["bbox"] for g in gts_sorted]).reshape(-1, 4))
    g_matched = np.zeros(len(gts_sorted), bool)
    tp = np.zeros(len(dets), bool)
    d_ign = np.zeros(len(dets), bool)
    for di, d in enumerate(dets):
        best, best_iou = -1, min(thr, 1 - 1e-10)
        for gi in range(len(gts_sorted)):
            if g_matched[gi]:
                continue
            if best > -1 and not g_ign[best] and g_ign[gi]:
                break
            if ious[di, gi] < best_iou:
                continue
            best_iou, best = ious[di, gi], gi
        if best >= 0:
            g_matched[best] = True
            tp[di] = True
            d_ign[di] = g_ign[best]
        else:
            a = d["bbox"][2] * d["bbox"][3]
            d_ign[di] = a < area_rng[0] or a >= area_rng[1]
    return np.array([d["score"] for d in dets]), tp, d_ign, int((~g_ign).sum())


def _precision_at_recall(scores, tp, ign, n_gt) -> float:
    """101-point interpolated AP for one class / threshold / area range."""
    keep = ~ign
    order = np.argsort(-scores[keep], kind="mergesort")
    tp = tp[keep][order].astype(np.float64)
    fp = 1.0 - tp
    tp_c, fp_c = np.cumsum(tp), np.cumsum(fp)
    recall = tp_c / n_gt
    precision = tp_c / np.maximum(tp_c + fp_c, np.finfo(np.float64).eps)
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
    return float(q.mean())


def class_ap(predictions: Sequence[dict], ground_truth: Sequence[dict], class_id: int, thr: float,
             area: str = "all", max_detections: int = 100) -> Optional[float]:
    """AP for one class at one IoU threshold; None when the class has no GT in range."""
    area_rng = AREA_RANGES[area]
    image_ids = sorted({g["image_id"] for g in ground_truth} | {p["image_id"] for p in predictions}, key=str)
    all_scores, all_tp, all_ign, n_gt = [], [], [], 0
    for img in image_ids:
        gts = [g for g in ground_truth if g["image_id"] == img and g["class_id"] == class_id]
        dets = [p for p in predictions if p["image_id"] == img and p["class_id"] == class_id]
        order = np.argsort([-d["score"] for d in dets], kind="mergesort")
        dets = [dets[i] for i in order[:max_detections]]
        s, tp, ign, n = _match_image(dets, gts, thr, area_rng)
        all_scores.append(s)
        all_tp.append(tp)
        all_ign.append(ign)
        n_gt += n
    if n_gt == 0:
        return None
    return _precision_at_recall(np.concatenate(all_scores), np.concatenate(all_tp),
                                np.concatenate(all_ign), n_gt)


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def compute_ap(predictions: Sequence[dict], ground_truth: Sequence[dict],
               iou_thresholds: Sequence[float] = IOU_THRESHOLDS, max_detections: int = 100) -> EvalReport:
    """COCO-style AP family.

    ``predictions``: {image_id, class_id, score, bbox[x, y, w, h]} in HR pixels.
    ``ground_truth``: {image_id, class_id, bbox[x, y, w, h]} in HR pixels.
    Classes without any GT are excluded from the mean; an undefined mean is None.
    """
    classes = sorted({g["class_id"] for g in ground_truth})
    preds = [p for p in predictions if p["class_id"] in classes]
    table: dict[tuple[str, int, float], Optional[float]] = {}
    thresholds = list(iou_thresholds) + [t for t in (0.5, 0.75) if t not in iou_thresholds]
    for area in AREA_RANGES:
        for c in classes:
            for t in thresholds if area == "all" else iou_thresholds:
                table[(area, c, t)] = class_ap(preds, ground_truth, c, t, area, max_detections)

    def ap_over(area: str, ts: Sequence[float]) -> Optional[float]:
        per_class = [_mean(table[(area, c, t)] for t in ts) for c in classes]
        return _mean(per_class)

    per_class = {c: _mean(table[("all", c, t)] for t in iou_thresholds) for c in classes}
    return EvalReport(
        ap=ap_over("all", iou_thresholds),
        ap50=ap_over("all", [0.5]),
        ap75=ap_over("all", [0.75]),
        ap_s=ap_over("small", iou_thresholds),
        ap_m=ap_over("medium", iou_thresholds),
        ap_l=ap_over("large", iou_thresholds),
        per_class_ap={c: v for c, v in per_class.items() if v is not None},
    )


def ground_truth_records(samples) -> list[dict]:
    out = []
    for s in samples:
        H, W = s.hr_size
        for b in s.boxes:
            out.append({"image_id": s.image_id, "class_id": b.class_id, "bbox": b.xywh(W, H)})
    return out


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give the 99 dB cap."""
    a = np.asarray(a.detach().cpu() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().cpu() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr of {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# multiply-accumulate accounting
# ---------------------------------------------------------------------------

def _swin_layer_macs(h: int, w: int, c: int, window: int, mlp_ratio: float) -> int:
    win = min(window, h, w)
    n_pad = math.ceil(h / win) * win * math.ceil(w / win) * win
    n = h * w
    return (3 * c * c * n_pad            # qkv
            + 2 * n_pad * win * win * c  # scores and weighted sum
            + c * c * n_pad              # output projection
            + int(2 * mlp_ratio * c * c) * n)


@dataclass
class FlopsReport:
    input_hw: tuple[int, int]
    breakdown: dict[str, int]
    variants: dict[str, dict[str, float]]

    @property
    def flops_g(self) -> float:
        return self.variants["joint_filtering"]["total_g"]

    def to_dict(self) -> dict[str, Any]:
        return {"input_hw": list(self.input_hw), "breakdown_macs": self.breakdown, "variants": self.variants}

    def table(self) -> str:
        lines = [f"{'variant':<18} {'attn sites':>12} {'attn GMac':>10} {'total GMac':>11} {'attn ratio':>10}"]
        for name, v in self.variants.items():
            lines.append(f"{name:<18} {int(v['attention_sites']):>12d} {v['attention_g']:>10.6f} "
                         f"{v['total_g']:>11.6f} {v['attention_ratio']:>10.4f}")
        return "\n".join(lines)


def detection_encoder_macs(active_per_layer: Sequence[int], sites_per_layer: Sequence[int], n_tokens: int,
                           d: int, levels: int, heads: int, points: int, ffn: int) -> tuple[int, int]:
    """(attention subterm, everything else) for the filtered deformable encoder.

    The attention subterm is one multiply-accumulate per sampled value channel
    per level at every site (query x head x point); per-query projections scale
    with the active count and the value projection with all tokens.
    """
    head_dim = d // heads
    attn = sum(s * levels * head_dim for s in sites_per_layer)
    per_query = d * heads * levels * points * 3 + d * d + 2 * d * ffn
    other = sum(n_tokens * d * d + a * per_query for a in active_per_layer)
    return attn, other


def flops_report(cfg: RunConfig, input_hw: tuple[int, int]) -> FlopsReport:
    """Analytic MAC counts per module for the four filtering variants (LR input size ``input_hw``)."""
    H, W = input_hw
    e, det = cfg.encoder, cfg.detector
    ch = e.stage_channels
    dims = expected_level_dims(H, W)
    p = e.patch_size
    bd: dict[str, int] = {}
    bd["encoder.stem"] = dims[0][0] * dims[0][1] * 3 * p * p * ch[0]
    enc = 0
    for s, ((h, w), c) in enumerate(zip(dims, ch)):
        if s:
            enc += h * w * 4 * ch[s - 1] * c
        enc += e.stage_depths[s] * _swin_layer_macs(h, w, c, e.window_size, e.mlp_ratio)
    bd["encoder.stages"] = enc

    # SR decoder
    sr = cfg.decoder_sr
    c4 = ch[3]
    widths = [c4 // 2 ** i for i in range(6)]
    grids = [dims[3], dims[2], dims[1], dims[0], (math.ceil(H / 2), math.ceil(W / 2)), (H, W)]
    skips = [ch[2], ch[1], ch[0], 0, 3]
    dec = 0
    for i in range(5):
        hi, wi = grids[i]
        ho, wo = grids[i + 1]
        dec += hi * wi * widths[i] * widths[i + 1] * 4
        if skips[i]:
            dec += ho * wo * (widths[i + 1] + skips[i]) * widths[i + 1]
        dec += sr.blocks_per_level * _swin_layer_macs(ho, wo, widths[i + 1], sr.window_size, 4.0)
    k = sr.recon_channels
    dec += H * W * 9 * widths[5] * 4 * k + 4 * H * W * 9 * k * 3
    bd["sr_decoder"] = dec

    # detection branch outside the filtered encoder
    d, L, M, P = det.d_model, 4, det.num_heads, det.num_points
    tokens = [h * w for h, w in dims]
    N = sum(tokens)
    hid = cfg.saliency.hidden_dim
    bd["detector.input_proj"] = sum(n * c * d for n, c in zip(tokens, ch))
    bd["detector.saliency"] = N * (d * hid + hid * hid // 2 + hid // 2)
    Q = min(det.num_queries, N)
    bd["detector.proposals"] = N * (d * d + d * det.num_classes + 2 * d * d + 4 * d)
    dec_layer = (4 * Q * d * d + 2 * Q * Q * d + Q * (d * M * L * P * 3 + 2 * d * d)
                 + Q * M * P * L * (d // M) + 2 * Q * d * det.dim_feedforward)
    heads_macs = Q * (d * det.num_classes + 2 * d * d + 4 * d + 2 * d * d + d * d)
    bd["detector.decoder"] = det.num_decoder_layers * (dec_layer + heads_macs)

    base = FilterSchedule(tuple(cfg.filter.beta), tuple(cfg.filter.gamma))
    one_b, one_g = (1.0,) * len(base.beta), (1.0,) * len(base.gamma)
    schedules = {
        "no_filtering": FilterSchedule(one_b, one_g),
        "layer_filtering": FilterSchedule(one_b, base.gamma),
        "scale_filtering": FilterSchedule(base.beta, one_g),
        "joint_filtering": base,
    }
    fixed = sum(bd.values())
    variants: dict[str, dict[str, float]] = {}
    baseline_attn = None
    for name, sch in schedules.items():
        budget = attention_site_count(sch, tokens, heads=M, points=P)
        active = [s // (M * P) for s in budget.per_layer_filtered]
        attn, other = detection_encoder_macs(active, budget.per_layer_filtered, N, d, L, M, P, det.dim_feedforward)
        baseline_attn = attn if baseline_attn is None else baseline_attn
        variants[name] = {
            "attention_sites": budget.sites_filtered,
            "attention_g": attn / 1e9,
            "detection_encoder_g": (attn + other) / 1e9,
            "total_g": (fixed + attn + other) / 1e9,
            "attention_ratio": attn / baseline_attn if baseline_attn else 1.0,
        }
    return FlopsReport((H, W), bd, variants)


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------

@torch.no_grad()
def measure_fps(fn, warmup: int = 5, runs: int = 50) -> float:
    """Frames per second from the median of ``runs`` timed calls after ``warmup`` calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    return 1.0 / med if med > 0 else math.inf
