"""Full network: shared encoder feeding the SR decoder and the detection transformer."""
from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .detection import (DetectionResult, DetectionTransformer, HungarianMatcher, LossWeights,
                        detection_losses, stage_loss)
from .encoder import FeaturePyramid, SharedEncoder
from .errors import ShapeError
from .saliency import pyramid_targets, saliency_loss
from .sr_decoder import SRDecoder, sr_loss

GROUPS = ("feat", "det", "sr")


@dataclass
class ModelOutput:
    detection: DetectionResult
    sr: Optional[torch.Tensor]       # (B, 2H, 2W, 3) or None when the SR branch is skipped
    pyramid: FeaturePyramid


class SDCoNet(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.encoder.stage_channels
        self.encoder = SharedEncoder(cfg.encoder)
        self.sr_decoder = SRDecoder(ch, cfg.decoder_sr)
        self.detector = DetectionTransformer(ch, cfg.detector, cfg.saliency, cfg.filter)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """theta_feat (encoder), theta_det (detection branch incl. saliency), theta_sr."""
        return {
            "feat": list(self.encoder.parameters()),
            "det": list(self.detector.parameters()),
            "sr": list(self.sr_decoder.parameters()),
        }

    def forward(self, lr: torch.Tensor, with_sr: bool = True, filtering: bool = True) -> ModelOutput:
        pyramid = self.encoder(lr)
        det = self.detector(pyramid, filtering=filtering)
        sr = self.sr_decoder(pyramid) if with_sr else None
        return ModelOutput(det, sr, pyramid)

    @torch.no_grad()
    def predict(self, lr: torch.Tensor, image_ids: list, hr_size: tuple[int, int],
                max_detections: int = 100) -> list[dict]:
        """Prediction records {image_id, class_id, score, bbox[x, y, w, h]} in HR pixels."""
        out = self(lr, with_sr=False).detection.outputs
        return postprocess(out.logits, out.boxes, image_ids, hr_size, max_detections)


def postprocess(logits: torch.Tensor, boxes: torch.Tensor, image_ids: list, hr_size: tuple[int, int],
                max_detections: int = 100) -> list[dict]:
    H, W = hr_size
    B, Q, C = logits.shape
    prob = logits.sigmoid().flatten(1)
    k = min(max_detections, Q * C)
    scores, idx = prob.topk(k, dim=1)
    records = []
    for b in range(B):
        for s, i in zip(scores[b].tolist(), idx[b].tolist()):
            q, c = divmod(i, C)
            cx, cy, w, h = boxes[b, q].tolist()
            records.append({
                "image_id": image_ids[b],
                "class_id": int(c),
                "score": float(s),
                "bbox": [(cx - w / 2) * W, (cy - h / 2) * H, w * W, h * H],
            })
    return records


class Criterion:
    """Component losses of the joint objective.

    Detection terms are summed over the final decoder layer, every auxiliary
    decoder layer and the encoder proposals; ``total`` applies the stage weights.
    """

    def __init__(self, cfg: RunConfig):
        d = cfg.detector
        self.weights = LossWeights.from_config(d)
        self.matcher = HungarianMatcher(d.cost_class, d.cost_bbox, d.cost_giou)
        self.aux = d.aux_loss
        self.sigma = cfg.saliency.sigma
        self.focal_alpha = cfg.saliency.focal_alpha
        self.focal_gamma = cfg.saliency.focal_gamma

    def saliency_targets(self, targets: list[dict], det: DetectionResult, dtype) -> list[torch.Tensor]:
        per_image = []
        for t in targets:
            boxes = [SimpleNamespace(cx=b[0], cy=b[1], w=b[2], h=b[3]) for b in t["boxes"].tolist()]
            per_image.append(pyramid_targets(boxes, det.spatial_shapes, det.strides, det.image_size, self.sigma))
        return [torch.as_tensor(np.stack([p[l] for p in per_image]), dtype=dtype)[..., None]
                for l in range(len(det.spatial_shapes))]

    def __call__(self, out: ModelOutput, targets: list[dict], hr: Optional[torch.Tensor], stage: int) -> dict:
        det = out.detection
        o = det.outputs
        heads = [{"logits": o.logits, "boxes": o.boxes}]
        if self.aux:
            heads += o.aux_outputs
            if o.enc_outputs is not None:
                heads.append(o.enc_outputs)
        num_boxes = max(float(sum(len(t["labels"]) for t in targets)), 1.0)
        losses = {"cls": 0.0, "bbox": 0.0, "giou": 0.0}
        for h in heads:
            assign = self.matcher(h["logits"], h["boxes"], targets)
            part = detection_losses(h["logits"], h["boxes"], targets, assign, num_boxes)
            for k in losses:
                losses[k] = losses[k] + part[k]
        sal_t = self.saliency_targets(targets, det, o.logits.dtype)
        losses["sa"] = saliency_loss(det.saliency.maps, sal_t, self.focal_alpha, self.focal_gamma)
        if stage == 2:
            if out.sr is None or hr is None:
                raise ShapeError("stage 2 needs the SR output and the HR target")
            losses["sr"] = sr_loss(out.sr, hr)
        losses["total"] = stage_loss(losses, self.weights, stage)
        return losses
