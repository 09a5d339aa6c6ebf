"""Command-line entry point: synth-data, train, eval, flops, visualize-saliency."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .errors import SDCoNetError

EXIT_FAILURE = 1
EXIT_MISSING = 2


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code


def _fail_line(kind: str, message: str) -> str:
    # one line, stable prefix, JSON payload: easy to grep and to parse
    return "sdconet-error " + json.dumps({"type": kind, "message": message}, sort_keys=True)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def prepare_out_dir(path: Optional[str], force: bool, default: str) -> Path:
    out = Path(path or default)
    if out.exists() and any(out.iterdir()) and not force:
        raise CLIError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cache_dir() -> Path:
    return Path(os.environ.get("SDCONET_CACHE", Path.home() / ".cache" / "sdconet"))


def _dataset(cfg: RunConfig, data_dir: Optional[str]):
    from .data import load_dataset, synthesize, write_dataset
    if data_dir:
        if not (Path(data_dir) / "annotations.json").is_file():
            raise CLIError(f"no annotations.json in {data_dir}", EXIT_MISSING)
        return load_dataset(data_dir)
    key = hashlib.sha256(json.dumps([cfg.seed, cfg.to_dict()["data"]], sort_keys=True).encode()).hexdigest()[:12]
    cached = cache_dir() / f"synth-{key}"
    if (cached / "annotations.json").is_file():
        return load_dataset(cached)
    samples = synthesize(cfg.data, cfg.seed, cfg.detector.num_classes)
    write_dataset(cached, samples, {"seed": cfg.seed, "data": cfg.to_dict()["data"]}, cfg.detector.num_classes)
    return load_dataset(cached)


def _checkpoint(path: str):
    from .trainer import model_from_checkpoint
    if not Path(path).is_file():
        raise CLIError(f"checkpoint not found: {path}", EXIT_MISSING)
    return model_from_checkpoint(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    from .data import synthesize, write_dataset
    cfg = load_config(args)
    for flag, field in (("count", "count"), ("canvas", "canvas"), ("tile_size", "tile_size"), ("overlap", "overlap")):
        if getattr(args, flag) is not None:
            setattr(cfg.data, field, getattr(args, flag))
    cfg.validate()
    out = prepare_out_dir(args.out_dir, args.force, "data")
    samples = synthesize(cfg.data, cfg.seed, cfg.detector.num_classes)
    manifest = {"seed": cfg.seed, "count": len(samples), "data": cfg.to_dict()["data"]}
    write_dataset(out, samples, manifest, cfg.detector.num_classes)
    print(json.dumps({"out_dir": str(out), "images": len(samples),
                      "boxes": sum(len(s.boxes) for s in samples)}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .trainer import train
    cfg = load_config(args)
    if args.resume:
        if not Path(args.resume).is_file():
            raise CLIError(f"checkpoint not found: {args.resume}", EXIT_MISSING)
        out = Path(args.out_dir or Path(args.resume).parent.parent)
    else:
        out = prepare_out_dir(args.out_dir, args.force, "runs/train")
    (out / "config.json").write_text(cfg.to_json())
    samples = _dataset(cfg, args.data)
    result = train(cfg, samples, out_dir=out, resume=args.resume)
    last = result.state.history[-1] if result.state.history else {}
    print(json.dumps({"final": True, "epoch": result.state.epoch, "stage": result.state.stage,
                      "losses": last.get("losses"), "ap": last.get("ap"),
                      "checkpoint": str(out / "final.pt")}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .data import bicubic_upsample_torch, collate
    from .metrics import measure_fps, psnr
    from .trainer import evaluate_detection
    model, cfg, _ = _checkpoint(args.checkpoint)
    if args.seed is not None:
        cfg.seed = args.seed
    samples = _dataset(cfg, args.data)
    preds, report = evaluate_detection(model, samples, cfg.eval.max_detections)
    sr_vals, bic_vals = [], []
    with torch.no_grad():
        for i in range(0, len(samples), 4):
            b = collate(samples[i:i + 4])
            sr = model(b["lr"]).sr
            for k in range(len(b["image_ids"])):
                sr_vals.append(psnr(sr[k], b["hr"][k]))
                bic_vals.append(psnr(bicubic_upsample_torch(b["lr"][k:k + 1])[0], b["hr"][k]))
    report.psnr_db = float(np.mean(sr_vals)) if sr_vals else None
    report.psnr_bicubic_db = float(np.mean(bic_vals)) if bic_vals else None
    if args.fps and samples:
        x = collate(samples[:1])["lr"]
        report.fps = measure_fps(lambda: model(x), cfg.eval.fps_warmup, cfg.eval.fps_runs)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        (out / "predictions.json").write_text(json.dumps(preds))
    print(report.table())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_flops(args) -> int:
    from .metrics import flops_report
    cfg = load_config(args)
    hw = tuple(args.input_size) if args.input_size else (cfg.data.canvas // 2, cfg.data.canvas // 2)
    rep = flops_report(cfg, hw)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "flops.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
    if args.json:
        print(json.dumps(rep.to_dict(), sort_keys=True))
    else:
        print(rep.table())
    return 0


def cmd_visualize_saliency(args) -> int:
    from .data import read_png, write_png
    model, cfg, _ = _checkpoint(args.checkpoint)
    if not Path(args.image).is_file():
        raise CLIError(f"image not found: {args.image}", EXIT_MISSING)
    img = torch.from_numpy(read_png(args.image))[None]
    out = Path(args.out_dir or "saliency")
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        det = model(img, with_sr=False).detection
    levels = []
    for l, m in enumerate(det.saliency.maps):
        s = m[0, ..., 0].sigmoid().numpy()
        lo, hi = float(s.min()), float(s.max())
        norm = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
        path = out / f"saliency_level{l + 1}.png"
        write_png(path, norm)
        levels.append({"level": l + 1, "file": path.name, "shape": list(s.shape), "min": lo, "max": hi,
                       "mean": float(s.mean())})
    sidecar = {"alpha": float(torch.as_tensor(det.saliency.alpha).detach()), "image": str(args.image), "levels": levels}
    (out / "saliency.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    print(json.dumps(sidecar, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (overrides defaults)")
    common.add_argument("--seed", type=int, help="seed for every stochastic step (overrides the config)")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")

    p = argparse.ArgumentParser(prog="sdconet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int)
    s.add_argument("--canvas", type=int)
    s.add_argument("--tile-size", type=int)
    s.add_argument("--overlap", type=int)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", parents=[common], help="two-stage training")
    s.add_argument("--data", help="dataset directory (default: synthesize from the config)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="AP family and PSNR of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="dataset directory (default: synthesize from the checkpoint config)")
    s.add_argument("--fps", action="store_true", help="also measure batch-1 throughput")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("flops", parents=[common], help="attention-site and MAC accounting")
    s.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"), help="LR input size")
    s.add_argument("--json", action="store_true", help="print JSON instead of the table")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("visualize-saliency", parents=[common], help="per-level saliency maps as PNG")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True, help="input (LR) image, PNG")
    s.set_defaults(func=cmd_visualize_saliency)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as e:
        print(_fail_line("CLIError", str(e)), file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(_fail_line("FileNotFoundError", str(e)), file=sys.stderr)
        return EXIT_MISSING
    except SDCoNetError as e:
        print(_fail_line(type(e).__name__, str(e)), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
