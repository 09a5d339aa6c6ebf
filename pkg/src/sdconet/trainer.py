"""Two-stage gradient routing: detection-only warm-up with the SR branch frozen, then
joint training with the SR learning rate scaled by rho."""
from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig, TrainerConfig
from .data import Sample, collate
from .errors import ContractError, TrainingError
from .metrics import compute_ap, ground_truth_records
from .model import GROUPS, Criterion, SDCoNet

CHECKPOINT_FORMAT = "sdconet-checkpoint-v1"


@dataclass
class GroupState:
    lr: float
    frozen: bool = False


@dataclass
class TrainState:
    epoch: int = 0                 # last completed (or currently routed) epoch, 1-based
    stage: int = 1
    groups: dict[str, GroupState] = field(default_factory=lambda: {g: GroupState(0.0) for g in GROUPS})
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best_ap50: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainState":
        d = json.loads(text)
        d["groups"] = {k: GroupState(**v) for k, v in d["groups"].items()}
        return cls(**d)


def decay_factor(cfg: TrainerConfig, epoch: int) -> float:
    """Step decay: the lr is multiplied by ``lr_decay`` once per milestone already passed."""
    return cfg.lr_decay ** bisect.bisect_right(cfg.milestones, epoch - 1)


def routed_lrs(cfg: TrainerConfig, epoch: int) -> tuple[int, dict[str, float]]:
    stage = 1 if epoch <= cfg.T_det else 2
    f = decay_factor(cfg, epoch)
    eta_det = (cfg.eta_det_1 if stage == 1 else cfg.eta_det_2) * f
    eta_feat = (cfg.eta_feat_1 if stage == 1 else cfg.eta_feat_2) * cfg.backbone_lr_mult * f
    return stage, {"feat": eta_feat, "det": eta_det, "sr": cfg.rho * eta_det}


def build_optimizer(model: SDCoNet, cfg: TrainerConfig) -> torch.optim.AdamW:
    groups = model.param_groups()
    return torch.optim.AdamW(
        [{"params": groups[g], "name": g, "lr": cfg.eta_det_1} for g in GROUPS],
        lr=cfg.eta_det_1, weight_decay=cfg.weight_decay,
    )


def set_routing(state: TrainState, epoch: int, cfg: TrainerConfig, model: Optional[SDCoNet] = None,
                optimizer: Optional[torch.optim.Optimizer] = None) -> TrainState:
    """Route epoch ``epoch``: stage 1 (SR frozen) while epoch <= T_det, else stage 2."""
    if not 1 <= epoch <= cfg.T_tot:
        raise ContractError(f"epoch {epoch} outside [1, {cfg.T_tot}]")
    stage, lrs = routed_lrs(cfg, epoch)
    state.epoch = epoch
    state.stage = stage
    for g in GROUPS:
        state.groups[g] = GroupState(lr=lrs[g], frozen=(g == "sr" and stage == 1))
    if model is not None:
        for p in model.sr_decoder.parameters():
            p.requires_grad_(stage == 2)
    if optimizer is not None:
        for pg in optimizer.param_groups:
            pg["lr"] = 0.0 if state.groups[pg["name"]].frozen else state.groups[pg["name"]].lr
    return state


def _trainable(model: SDCoNet) -> list[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def _step(model, criterion, optimizer, batch, state: TrainState, cfg: TrainerConfig) -> dict[str, float]:
    out = model(batch["lr"], with_sr=state.stage == 2)
    o = out.detection.outputs
    if not (torch.isfinite(o.logits).all() and torch.isfinite(o.boxes).all()):
        raise TrainingError(f"non-finite detection outputs at epoch {state.epoch}, step {state.step} "
                            f"(non-finite inputs: {int((~torch.isfinite(batch['lr'])).sum())})")
    losses = criterion(out, batch["targets"], batch["hr"] if state.stage == 2 else None, state.stage)
    total = losses["total"]
    if not torch.isfinite(total):
        parts = {k: float(v.detach()) for k, v in losses.items()}
        raise TrainingError(f"non-finite loss at epoch {state.epoch}, step {state.step}: {parts}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(_trainable(model), cfg.clip_norm)
    optimizer.step()
    state.step += 1
    record = {k: float(v.detach()) for k, v in losses.items()}
    record["grad_norm"] = float(grad_norm)
    return record


def stage_one_step(model, criterion, optimizer, batch, state: TrainState, cfg: TrainerConfig) -> dict[str, float]:
    """One update of theta_feat and theta_det on the detection objective."""
    if state.stage != 1:
        raise ContractError("stage_one_step called outside stage 1")
    return _step(model, criterion, optimizer, batch, state, cfg)


def stage_two_step(model, criterion, optimizer, batch, state: TrainState, cfg: TrainerConfig) -> dict[str, float]:
    """One joint update of all three groups on the detection + SR objective."""
    if state.stage != 2:
        raise ContractError("stage_two_step called outside stage 2")
    return _step(model, criterion, optimizer, batch, state, cfg)


def batches(samples: Sequence[Sample], batch_size: int, seed: int, epoch: int, repeats: int = 1):
    """Deterministic shuffled batches for one epoch."""
    rng = np.random.default_rng([seed, epoch])
    order = np.concatenate([rng.permutation(len(samples)) for _ in range(repeats)])
    for i in range(0, len(order), batch_size):
        yield collate([samples[j] for j in order[i:i + batch_size]])


@torch.no_grad()
def evaluate_detection(model: SDCoNet, samples: Sequence[Sample], max_detections: int = 100,
                       batch_size: int = 4) -> tuple[list[dict], Any]:
    was_training = model.training
    model.eval()
    preds = []
    for i in range(0, len(samples), batch_size):
        b = collate(samples[i:i + batch_size])
        preds += model.predict(b["lr"], b["image_ids"], samples[i].hr_size, max_detections)
    model.train(was_training)
    return preds, compute_ap(preds, ground_truth_records(samples), max_detections=max_detections)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: SDCoNet, optimizer, state: TrainState, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "params": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_state": state.to_json(),
        "config": cfg.to_dict(),
    }, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return ckpt


def model_from_checkpoint(path: str | Path) -> tuple[SDCoNet, RunConfig, TrainState]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt["config"])
    model = SDCoNet(cfg)
    model.load_state_dict(ckpt["params"])
    model.eval()
    return model, cfg, TrainState.from_json(ckpt["train_state"])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SDCoNet
    state: TrainState
    checkpoints: list[Path]


def _mean_records(records: list[dict]) -> dict[str, float]:
    keys = records[0].keys() if records else []
    return {k: float(np.mean([r[k] for r in records if k in r])) for k in keys}


def train(cfg: RunConfig, samples: Sequence[Sample], out_dir: Optional[str | Path] = None,
          resume: Optional[str | Path] = None, log: Callable[[str], None] = print,
          model: Optional[SDCoNet] = None) -> TrainResult:
    """Run epochs ``state.epoch + 1 .. T_tot`` with per-epoch routing, checkpoints and NDJSON metrics."""
    cfg.validate()
    if not samples:
        raise ContractError("training needs a non-empty dataset")
    tcfg = cfg.trainer
    torch.manual_seed(cfg.seed)
    if model is None:
        model = SDCoNet(cfg)
    criterion = Criterion(cfg)
    optimizer = build_optimizer(model, tcfg)
    state = TrainState()
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["params"])
        state = TrainState.from_json(ckpt["train_state"])
        set_routing(state, state.epoch, tcfg, model, optimizer)
        optimizer.load_state_dict(ckpt["optimizer"])
        log(f"resumed from {resume} after epoch {state.epoch}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints" if out_dir else None
    kept: list[Path] = sorted(ckpt_dir.glob("epoch_*.pt")) if ckpt_dir and ckpt_dir.exists() else []
    model.train()
    prev_stage = state.stage if state.epoch else None
    for epoch in range(state.epoch + 1, tcfg.T_tot + 1):
        set_routing(state, epoch, tcfg, model, optimizer)
        if prev_stage == 1 and state.stage == 2:
            log(f"stage 1 → stage 2 at epoch {epoch}")
        prev_stage = state.stage
        step = stage_one_step if state.stage == 1 else stage_two_step
        records = [step(model, criterion, optimizer, b, state, tcfg)
                   for b in batches(samples, tcfg.batch_size, cfg.seed, epoch, tcfg.epoch_repeats)]
        _, report = evaluate_detection(model, list(samples)[:tcfg.snapshot_images], cfg.eval.max_detections)
        entry = {
            "epoch": epoch,
            "stage": state.stage,
            "losses": _mean_records(records),
            "losses_first_step": records[0],
            "lrs": {g: state.groups[g].lr for g in GROUPS},
            "ap": {"ap": report.ap, "ap50": report.ap50, "ap75": report.ap75},
        }
        state.history.append(entry)
        log(json.dumps(entry, sort_keys=True))
        if out_dir is not None:
            with open(out_dir / "metrics.ndjson", "a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
            path = ckpt_dir / f"epoch_{epoch:03d}.pt"
            save_checkpoint(path, model, optimizer, state, cfg)
            kept.append(path)
            while len(kept) > tcfg.keep_last:
                kept.pop(0).unlink(missing_ok=True)
            ap50 = report.ap50 if report.ap50 is not None else -math.inf
            if state.best_ap50 is None or ap50 > state.best_ap50:
                state.best_ap50 = report.ap50
                save_checkpoint(ckpt_dir / "best.pt", model, optimizer, state, cfg)
    if out_dir is not None:
        save_checkpoint(out_dir / "final.pt", model, optimizer, state, cfg)
    return TrainResult(model, state, kept)
