"""Detection branch: saliency-filtered deformable encoder, two-stage query decoder,
bipartite matching and the set-prediction losses."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import permutations
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import DetectorConfig, FilterConfig, SaliencyConfig
from .deform_attn import MSDeformAttn
from .encoder import FeaturePyramid
from .errors import ConfigError, ContractError, DegenerateBoxError
from .losses import sigmoid_focal_loss
from .query_filter import FilteredEncoder, FilterSchedule
from .saliency import SaliencyHead, SaliencyPyramid


# ---------------------------------------------------------------------------
# box utilities
# ---------------------------------------------------------------------------

def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    area_a, area_b = box_area(a), box_area(b)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU between every pair of xyxy boxes, shape (len(a), len(b))."""
    iou, union = pairwise_iou(a, b)
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    enclosing = wh[..., 0] * wh[..., 1]
    return iou - (enclosing - union) / enclosing


def giou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """GIoU of two xyxy boxes; both must have positive extent."""
    for b in (box_a, box_b):
        if not (b[2] > b[0] and b[3] > b[1]):
            raise DegenerateBoxError(f"degenerate box {list(b)}")
    a = torch.as_tensor([box_a], dtype=torch.float64)
    b = torch.as_tensor([box_b], dtype=torch.float64)
    return float(pairwise_giou(a, b)[0, 0])


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    query_idx: np.ndarray
    gt_idx: np.ndarray
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        """gt index -> query index."""
        return {int(g): int(q) for q, g in zip(self.query_idx, self.gt_idx)}


def hungarian_match(cost) -> Assignment:
    """Minimum-total-cost one-to-one assignment of GTs (columns) to queries (rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError("cost matrix must be 2-D (queries x gts)")
    nq, ng = cost.shape
    if ng > nq:
        raise ContractError(f"{ng} ground-truth boxes but only {nq} queries")
    if ng == 0:
        return Assignment(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 0.0)
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols)
    rows, cols = rows[order], cols[order]
    return Assignment(rows.astype(np.int64), cols.astype(np.int64), float(cost[rows, cols].sum()))


def brute_force_match(cost) -> float:
    """Exhaustive minimum over injective GT->query maps (small problems only)."""
    cost = np.asarray(cost, dtype=np.float64)
    nq, ng = cost.shape
    best = math.inf
    for perm in permutations(range(nq), ng):
        best = min(best, float(sum(cost[q, g] for g, q in enumerate(perm))))
    return best if ng else 0.0


def match_cost(pred_logits: torch.Tensor, pred_boxes: torch.Tensor, gt_labels: torch.Tensor,
               gt_boxes: torch.Tensor, w_cls: float = 2.0, w_bbox: float = 5.0, w_giou: float = 2.0,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """(Q, G) cost = w_cls * focal class cost + w_bbox * L1 + w_giou * (1 - GIoU)."""
    p = pred_logits.sigmoid()
    neg = (1 - alpha) * p ** gamma * -(1 - p + 1e-8).log()
    pos = alpha * (1 - p) ** gamma * -(p + 1e-8).log()
    c_cls = pos[:, gt_labels] - neg[:, gt_labels]
    c_bbox = torch.cdist(pred_boxes, gt_boxes, p=1)
    c_giou = 1 - pairwise_giou(box_cxcywh_to_xyxy(pred_boxes), box_cxcywh_to_xyxy(gt_boxes))
    return w_cls * c_cls + w_bbox * c_bbox + w_giou * c_giou


class HungarianMatcher:
    def __init__(self, cost_class: float = 2.0, cost_bbox: float = 5.0, cost_giou: float = 2.0):
        self.cost_class = cost_class
        self.cost_bbox = cost_bbox
        self.cost_giou = cost_giou

    @torch.no_grad()
    def __call__(self, pred_logits: torch.Tensor, pred_boxes: torch.Tensor, targets: list[dict]) -> list[Assignment]:
        out = []
        for b, t in enumerate(targets):
            if len(t["labels"]) == 0:
                out.append(hungarian_match(np.zeros((pred_logits.shape[1], 0))))
                continue
            c = match_cost(pred_logits[b], pred_boxes[b], t["labels"], t["boxes"],
                           self.cost_class, self.cost_bbox, self.cost_giou)
            out.append(hungarian_match(c.cpu().numpy()))
        return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def detection_losses(pred_logits: torch.Tensor, pred_boxes: torch.Tensor, targets: list[dict],
                     assignment: list[Assignment], num_boxes: Optional[float] = None,
                     focal_alpha: float = 0.25, focal_gamma: float = 2.0) -> dict[str, torch.Tensor]:
    """Classification (focal over all queries), L1 and GIoU losses over matched pairs.

    L_cls is normalized by the number of GT boxes (at least 1); L_bbox is the
    mean absolute error over the 4 coordinates of matched boxes; L_giou is the
    mean of 1 - GIoU over matched boxes.
    """
    B, Q, C = pred_logits.shape
    total = sum(len(t["labels"]) for t in targets)
    if num_boxes is None:
        num_boxes = max(float(total), 1.0)
    target_cls = torch.zeros_like(pred_logits)
    src_boxes, tgt_boxes = [], []
    for b, (t, a) in enumerate(zip(targets, assignment)):
        if len(a.query_idx):
            q = torch.as_tensor(a.query_idx, device=pred_logits.device)
            g = torch.as_tensor(a.gt_idx, device=pred_logits.device)
            target_cls[b, q, t["labels"][g]] = 1.0
            src_boxes.append(pred_boxes[b, q])
            tgt_boxes.append(t["boxes"][g])
    loss_cls = sigmoid_focal_loss(pred_logits, target_cls, focal_alpha, focal_gamma).sum() / num_boxes
    if src_boxes:
        sb = torch.cat(src_boxes)
        tb = torch.cat(tgt_boxes).to(sb.dtype)
        loss_bbox = (sb - tb).abs().sum() / (4.0 * num_boxes)
        g = torch.diag(pairwise_giou(box_cxcywh_to_xyxy(sb), box_cxcywh_to_xyxy(tb)))
        loss_giou = (1 - g).sum() / num_boxes
    else:
        loss_bbox = pred_boxes.sum() * 0.0
        loss_giou = pred_boxes.sum() * 0.0
    return {"cls": loss_cls, "bbox": loss_bbox, "giou": loss_giou}


@dataclass
class LossWeights:
    cls: float = 1.0
    bbox: float = 5.0
    giou: float = 2.0
    sa: float = 1.0
    sr: float = 1.0

    def __post_init__(self):
        for k in ("cls", "bbox", "giou", "sa", "sr"):
            if getattr(self, k) < 0:
                raise ConfigError(f"loss weight {k} must be non-negative")

    @classmethod
    def from_config(cls, cfg: DetectorConfig) -> "LossWeights":
        return cls(cfg.weight_cls, cfg.weight_bbox, cfg.weight_giou, cfg.weight_sa, cfg.weight_sr)


def stage_loss(losses: dict, weights: LossWeights, stage: int):
    """Weighted detection objective; stage 2 adds the SR reconstruction term."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    total = (weights.cls * losses["cls"] + weights.bbox * losses["bbox"]
             + weights.giou * losses["giou"] + weights.sa * losses["sa"])
    if stage == 2:
        total = total + weights.sr * losses["sr"]
    return total


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [out_dim]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def sine_embed(coords: torch.Tensor, num_feats: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sine/cosine embedding of each coordinate in [0, 1]; output width coords.shape[-1] * num_feats."""
    scale = 2 * math.pi
    dim_t = torch.arange(num_feats, dtype=coords.dtype, device=coords.device)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / num_feats)
    pos = coords[..., None] * scale / dim_t
    pos = torch.stack([pos[..., 0::2].sin(), pos[..., 1::2].cos()], dim=-1).flatten(-2)
    return pos.flatten(-2)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_levels: int, n_heads: int, n_points: int, dim_feedforward: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MSDeformAttn(d_model, n_levels, n_heads, n_points)
        self.norm1 = nn.LayerNorm(d_model)
        self.linear1 = nn.Linear(d_model, dim_feedforward)
        self.linear2 = nn.Linear(dim_feedforward, d_model)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, tgt, query_pos, reference_boxes, memory, spatial_shapes):
        q = k = tgt + query_pos
        tgt = self.norm2(tgt + self.self_attn(q, k, tgt, need_weights=False)[0])
        tgt = self.norm1(tgt + self.cross_attn(tgt + query_pos, reference_boxes, memory, spatial_shapes))
        return self.norm3(tgt + self.linear2(F.relu(self.linear1(tgt))))


@dataclass
class DetectionOutput:
    logits: torch.Tensor                     # (B, Q, num_classes)
    boxes: torch.Tensor                      # (B, Q, 4) normalized cxcywh
    aux_outputs: list[dict] = field(default_factory=list)
    enc_outputs: Optional[dict] = None


@dataclass
class DetectionResult:
    outputs: DetectionOutput
    saliency: SaliencyPyramid
    active_sets: list
    spatial_shapes: list[tuple[int, int]]
    strides: list[int]
    image_size: tuple[int, int]


class DetectionTransformer(nn.Module):
    """Input projection, saliency head, filtered deformable encoder and two-stage decoder."""

    def __init__(self, in_channels: Sequence[int], cfg: DetectorConfig, sal_cfg: SaliencyConfig,
                 filter_cfg: FilterConfig):
        super().__init__()
        problems = cfg.problems() + sal_cfg.problems() + filter_cfg.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        d = cfg.d_model
        L = len(in_channels)
        self.cfg = cfg
        self.num_levels = L
        self.input_proj = nn.ModuleList(nn.Sequential(nn.Linear(c, d), nn.LayerNorm(d)) for c in in_channels)
        self.level_embed = nn.Parameter(torch.empty(L, d))
        nn.init.normal_(self.level_embed, std=0.02)
        self.saliency = SaliencyHead(d, sal_cfg.hidden_dim, sal_cfg.alpha_init)
        self.schedule = FilterSchedule(tuple(filter_cfg.beta), tuple(filter_cfg.gamma))
        self.encoder = FilteredEncoder(d, L, cfg.num_heads, cfg.num_points, cfg.dim_feedforward, self.schedule,
                                       filter_cfg.background_embedding, filter_cfg.max_rows, filter_cfg.max_cols)
        self.enc_output = nn.Linear(d, d)
        self.enc_output_norm = nn.LayerNorm(d)
        self.enc_class_head = nn.Linear(d, cfg.num_classes)
        self.enc_bbox_head = MLP(d, d, 4, 3)
        self.tgt_embed = nn.Embedding(cfg.num_queries, d)
        self.ref_point_head = MLP(2 * d, d, d, 2)
        self.decoder = nn.ModuleList(
            DecoderLayer(d, L, cfg.num_heads, cfg.num_points, cfg.dim_feedforward)
            for _ in range(cfg.num_decoder_layers)
        )
        self.class_heads = nn.ModuleList(nn.Linear(d, cfg.num_classes) for _ in range(cfg.num_decoder_layers))
        self.bbox_heads = nn.ModuleList(MLP(d, d, 4, 3) for _ in range(cfg.num_decoder_layers))
        self._reset_parameters()

    def _reset_parameters(self):
        bias = -math.log((1 - 0.01) / 0.01)
        for head in list(self.class_heads) + [self.enc_class_head]:
            nn.init.constant_(head.bias, bias)
        for head in list(self.bbox_heads) + [self.enc_bbox_head]:
            nn.init.constant_(head.layers[-1].weight, 0.0)
            nn.init.constant_(head.layers[-1].bias, 0.0)
        nn.init.normal_(self.tgt_embed.weight)

    # geometry helpers -------------------------------------------------------

    @staticmethod
    def token_centers(spatial_shapes, strides, image_size, device, dtype):
        """(N, 2) token centers in image-normalized (x, y)."""
        H, W = image_size
        out = []
        for (h, w), s in zip(spatial_shapes, strides):
            ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) * s / H
            xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) * s / W
            yy, xx = torch.meshgrid(ys, xs, indexing="ij")
            out.append(torch.stack([xx.flatten(), yy.flatten()], -1))
        return torch.cat(out)

    @staticmethod
    def valid_ratios(spatial_shapes, strides, image_size, device, dtype):
        """(L, 2) scale from image-normalized to per-level normalized coordinates."""
        H, W = image_size
        return torch.tensor([[W / (w * s), H / (h * s)] for (h, w), s in zip(spatial_shapes, strides)],
                            device=device, dtype=dtype)

    def proposals(self, centers: torch.Tensor, spatial_shapes) -> torch.Tensor:
        """(N, 4) unactivated anchor boxes: token center with level-dependent size."""
        wh = torch.cat([
            torch.full((h * w, 2), 0.05 * 2.0 ** lvl, device=centers.device, dtype=centers.dtype)
            for lvl, (h, w) in enumerate(spatial_shapes)
        ])
        return inverse_sigmoid(torch.cat([centers, wh], -1))

    # forward ----------------------------------------------------------------

    def embed_levels(self, pyramid: FeaturePyramid) -> list[torch.Tensor]:
        return [proj(f) for proj, f in zip(self.input_proj, pyramid.levels)]

    def forward(self, pyramid: FeaturePyramid, filtering: bool = True) -> DetectionResult:
        levels = self.embed_levels(pyramid)
        B = levels[0].shape[0]
        d = self.cfg.d_model
        shapes = [tuple(f.shape[1:3]) for f in levels]
        strides = list(pyramid.strides)
        image_size = tuple(pyramid.source_dims)
        dev, dt = levels[0].device, levels[0].dtype

        sal = self.saliency(levels)
        src = torch.cat([f.flatten(1, 2) for f in levels], dim=1)
        centers = self.token_centers(shapes, strides, image_size, dev, dt)
        vr = self.valid_ratios(shapes, strides, image_size, dev, dt)
        level_ids = torch.cat([torch.full((h * w,), i, device=dev) for i, (h, w) in enumerate(shapes)])
        pos = sine_embed(centers, d // 2) + self.level_embed[level_ids]
        pos = pos.unsqueeze(0).expand(B, -1, -1)
        ref = (centers[:, None, :] * vr[None]).unsqueeze(0).expand(B, -1, -1, -1)

        memory, active_sets = self.encoder(src, pos, ref, shapes, sal.flatten(), filtering=filtering)
        outputs = self.decode_queries(memory, shapes, centers, vr)
        return DetectionResult(outputs, sal, active_sets, shapes, strides, image_size)

    def decode_queries(self, memory: torch.Tensor, spatial_shapes, centers: torch.Tensor,
                       valid_ratios: torch.Tensor, num_queries: Optional[int] = None) -> DetectionOutput:
        """Top-scoring encoder tokens propose reference boxes; decoder layers refine them."""
        B, N, d = memory.shape
        Q = num_queries or self.cfg.num_queries
        if Q > N:
            warnings.warn(f"num_queries {Q} exceeds {N} encoder tokens; clamping")
            Q = N
        Q = min(Q, self.tgt_embed.num_embeddings)
        out_mem = self.enc_output_norm(self.enc_output(memory))
        enc_logits = self.enc_class_head(out_mem)
        enc_coord = self.enc_bbox_head(out_mem) + self.proposals(centers, spatial_shapes)
        topk = torch.topk(enc_logits.max(-1).values, Q, dim=1).indices
        topk_coord = enc_coord.gather(1, topk[..., None].expand(-1, -1, 4))
        enc_outputs = {
            "logits": enc_logits.gather(1, topk[..., None].expand(-1, -1, enc_logits.shape[-1])),
            "boxes": topk_coord.sigmoid(),
        }
        ref = topk_coord.sigmoid().detach()
        tgt = self.tgt_embed.weight[:Q].unsqueeze(0).expand(B, -1, -1)
        vr4 = torch.cat([valid_ratios, valid_ratios], -1)
        per_layer = []
        for layer, cls_head, box_head in zip(self.decoder, self.class_heads, self.bbox_heads):
            query_pos = self.ref_point_head(sine_embed(ref, d // 2))
            tgt = layer(tgt, query_pos, ref[:, :, None] * vr4[None, None], memory, spatial_shapes)
            boxes = (box_head(tgt) + inverse_sigmoid(ref)).sigmoid()
            per_layer.append({"logits": cls_head(tgt), "boxes": boxes})
            ref = boxes.detach()
        last = per_layer[-1]
        return DetectionOutput(last["logits"], last["boxes"], per_layer[:-1], enc_outputs)
