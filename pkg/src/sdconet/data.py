"""Synthetic scenes, bicubic x2 degradation, sliding-window tiling and annotation I/O."""
from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import DataConfig
from .errors import AnnotationError, ContractError, DegenerateBoxError, GenerationError

CLASS_NAMES = ("storage_tank", "vehicle", "ship", "airplane")
SMALL_AREA = 32 ** 2
MEDIUM_AREA = 96 ** 2
# clipped boxes keep at least this fraction of their original area or are dropped
TILE_RETENTION = 0.3


def size_bucket(area_px: float) -> str:
    if area_px < SMALL_AREA:
        return "small"
    if area_px < MEDIUM_AREA:
        return "medium"
    return "large"


@dataclass
class GTBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int
    size_bucket: str = "small"

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float, class_id: int,
                  image_w: int, image_h: int) -> "GTBox":
        """From a pixel [x, y, w, h] box; the bucket uses the pixel area in that frame."""
        if not (w > 0 and h > 0):
            raise DegenerateBoxError(f"box [{x}, {y}, {w}, {h}] has non-positive extent")
        return cls((x + w / 2) / image_w, (y + h / 2) / image_h, w / image_w, h / image_h,
                   int(class_id), size_bucket(w * h))

    def xywh(self, image_w: int, image_h: int) -> list[float]:
        return [(self.cx - self.w / 2) * image_w, (self.cy - self.h / 2) * image_h,
                self.w * image_w, self.h * image_h]


@dataclass
class Sample:
    hr_image: np.ndarray                 # (H, W, 3) float32 in [0, 1]
    boxes: list[GTBox]
    image_id: int
    lr_image: Optional[np.ndarray] = None

    @property
    def hr_size(self) -> tuple[int, int]:
        return self.hr_image.shape[0], self.hr_image.shape[1]

    def with_lr(self) -> "Sample":
        if self.lr_image is None:
            self.lr_image = degrade(self.hr_image)
        return self


@dataclass
class SceneSpec:
    canvas: tuple[int, int] = (128, 128)
    num_objects: tuple[int, int] = (2, 5)
    size_range: tuple[int, int] = (10, 40)
    clutter: float = 0.5
    num_classes: int = 4
    max_retries: int = 200

    @classmethod
    def from_config(cls, cfg: DataConfig, num_classes: int = 4) -> "SceneSpec":
        return cls((cfg.canvas, cfg.canvas), (cfg.min_objects, cfg.max_objects),
                   (cfg.min_size, cfg.max_size), cfg.clutter, num_classes)


# ---------------------------------------------------------------------------
# scene synthesis
# ---------------------------------------------------------------------------

def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one object inside a size x size square (not necessarily tight)."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - c, yy - c
    r = size / 2.0
    if kind == 0:  # disk
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == 1:  # axis-aligned rectangle, random aspect
        a = rng.uniform(0.45, 0.8)
        if rng.random() < 0.5:
            return (np.abs(dx) <= r) & (np.abs(dy) <= a * r)
        return (np.abs(dx) <= a * r) & (np.abs(dy) <= r)
    if kind == 2:  # elongated hull with a pointed bow
        horizontal = rng.random() < 0.5
        u, v = (dx, dy) if horizontal else (dy, dx)
        half_w = 0.28 * r
        body = (np.abs(u) <= 0.6 * r) & (np.abs(v) <= half_w)
        bow = (u > 0.6 * r) & (u <= r) & (np.abs(v) <= half_w * (r - u) / (0.4 * r))
        stern = (u < -0.6 * r) & (u >= -r) & (np.abs(v) <= half_w)
        return body | bow | stern
    # cross: fuselage plus wings
    t = max(1.0, 0.15 * size)
    fuselage = (np.abs(dx) <= t) & (np.abs(dy) <= r)
    wings = (np.abs(dy + 0.15 * r) <= t) & (np.abs(dx) <= r)
    tail = (np.abs(dy - 0.75 * r) <= 0.6 * t) & (np.abs(dx) <= 0.45 * r)
    return fuselage | wings | tail


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.15, 0.45, size=3)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.06, size=3)
        img += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[..., None] * amp
    return img


def _add_clutter(img: np.ndarray, level: float, rng: np.random.Generator) -> None:
    h, w, _ = img.shape
    n = int(round(level * (h * w) / 1024))
    for _ in range(n):
        y, x = rng.integers(0, h), rng.integers(0, w)
        length = int(rng.integers(2, 6))
        color = img[y, x] + rng.uniform(-0.12, 0.12, size=3)
        if rng.random() < 0.5:
            img[y, x:x + length] = color
        else:
            img[y:y + length, x] = color


def synth_scene(spec: SceneSpec, seed: int, image_id: int = 0) -> Sample:
    """Deterministic synthetic scene with tight boxes around every drawn object.

    Sizes are skewed small (squared-uniform draw); objects never overlap.
    """
    rng = np.random.default_rng(seed)
    H, W = spec.canvas
    lo, hi = spec.size_range
    if hi > min(H, W):
        raise GenerationError(f"object size {hi} exceeds canvas {H}x{W}")
    img = _background(H, W, rng)
    _add_clutter(img, spec.clutter, rng)
    n = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    occupied = np.zeros((H, W), dtype=bool)
    boxes: list[GTBox] = []
    for _ in range(n):
        kind = int(rng.integers(0, spec.num_classes)) % 4
        size = int(round(lo + (hi - lo) * rng.random() ** 2))
        mask = _shape_mask(kind, size, rng)
        ys, xs = np.nonzero(mask)
        mask = mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
        mh, mw = mask.shape
        for _attempt in range(spec.max_retries):
            y0 = int(rng.integers(0, H - mh + 1))
            x0 = int(rng.integers(0, W - mw + 1))
            # boxes never overlap and keep one pixel of margin
            if not occupied[max(0, y0 - 1):y0 + mh + 1, max(0, x0 - 1):x0 + mw + 1].any():
                break
        else:
            raise GenerationError(f"could not place object {len(boxes) + 1} of {n} after {spec.max_retries} tries")
        occupied[y0:y0 + mh, x0:x0 + mw] = True
        color = rng.uniform(0.65, 1.0, size=3)
        color[int(rng.integers(0, 3))] *= rng.uniform(0.2, 0.6)
        region = img[y0:y0 + mh, x0:x0 + mw]
        region[mask] = color
        boxes.append(GTBox.from_xywh(x0, y0, mw, mh, kind, W, H))
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Sample(hr_image=img.astype(np.float32), boxes=boxes, image_id=image_id)


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------

def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Separable bicubic resampling (a = -0.5) with antialiasing for downscaling."""
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=size, mode="bicubic", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy()


def degrade(hr: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Bicubic x1/2 downsampling of an (H, W, 3) image with even H and W."""
    H, W = hr.shape[:2]
    if H % 2 or W % 2:
        raise ContractError(f"degradation needs even dimensions, got {H}x{W}")
    lr = _resize(hr, (H // 2, W // 2))
    if clamp:
        lr = np.clip(lr, 0.0, 1.0)
    return lr.astype(hr.dtype, copy=False)


def bicubic_upsample(lr: np.ndarray, clamp: bool = True) -> np.ndarray:
    H, W = lr.shape[:2]
    up = _resize(lr, (2 * H, 2 * W))
    if clamp:
        up = np.clip(up, 0.0, 1.0)
    return up.astype(lr.dtype, copy=False)


def bicubic_upsample_torch(lr: torch.Tensor) -> torch.Tensor:
    """Batched channel-last variant of :func:`bicubic_upsample`."""
    from .sr_decoder import bicubic_up
    return bicubic_up(lr)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

@dataclass
class Tile:
    image: np.ndarray
    boxes: list[GTBox]
    origin: tuple[int, int]  # (x, y) of the tile's top-left corner in the source image


def tile_starts(size: int, tile_size: int, overlap: int) -> list[int]:
    if not 0 <= overlap < tile_size:
        raise ContractError(f"overlap {overlap} must lie in [0, tile_size={tile_size})")
    if size <= tile_size:
        return [0]
    stride = tile_size - overlap
    n = math.ceil((size - tile_size) / stride) + 1
    return [i * stride for i in range(n)]


def tile(image: np.ndarray, boxes: Sequence[GTBox], tile_size: int, overlap: int) -> list[Tile]:
    """Overlapping tiles of side ``tile_size``; the right/bottom remainder is zero-padded.

    Boxes are clipped to each tile and kept when the clipped part retains at
    least 30% of the original area.
    """
    H, W = image.shape[:2]
    ys, xs = tile_starts(H, tile_size, overlap), tile_starts(W, tile_size, overlap)
    px = [(b.xywh(W, H), b.class_id) for b in boxes]
    tiles = []
    for y0 in ys:
        for x0 in xs:
            patch = np.zeros((tile_size, tile_size) + image.shape[2:], dtype=image.dtype)
            crop = image[y0:y0 + tile_size, x0:x0 + tile_size]
            patch[:crop.shape[0], :crop.shape[1]] = crop
            kept = []
            for (bx, by, bw, bh), cls in px:
                ix0, iy0 = max(bx, x0), max(by, y0)
                ix1, iy1 = min(bx + bw, x0 + tile_size), min(by + bh, y0 + tile_size)
                if ix1 <= ix0 or iy1 <= iy0:
                    continue
                if (ix1 - ix0) * (iy1 - iy0) < TILE_RETENTION * bw * bh:
                    continue
                kept.append(GTBox.from_xywh(ix0 - x0, iy0 - y0, ix1 - ix0, iy1 - iy0, cls, tile_size, tile_size))
            tiles.append(Tile(patch, kept, (x0, y0)))
    return tiles


# ---------------------------------------------------------------------------
# annotation I/O
# ---------------------------------------------------------------------------

_IMAGE_KEYS = {"id", "file", "width", "height"}
_ANN_KEYS = {"image_id", "class_id", "bbox"}
_TOP_KEYS = {"images", "annotations", "categories"}


@dataclass
class AnnotationSet:
    images: list[dict[str, Any]] = field(default_factory=list)
    annotations: list[dict[str, Any]] = field(default_factory=list)
    categories: list[dict[str, Any]] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {**self.extra, "images": self.images, "annotations": self.annotations, "categories": self.categories}

    def boxes_for(self, image_id: int) -> list[GTBox]:
        img = next(i for i in self.images if i["id"] == image_id)
        return [GTBox.from_xywh(*a["bbox"], a["class_id"], img["width"], img["height"])
                for a in self.annotations if a["image_id"] == image_id]


def default_categories(num_classes: int = 4) -> list[dict[str, Any]]:
    return [{"id": i, "name": CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class_{i}"} for i in range(num_classes)]


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_annotations(path: str | Path, anns: AnnotationSet) -> None:
    atomic_write_text(path, json.dumps(anns.to_dict(), indent=1, sort_keys=True))


def _check_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise AnnotationError(f"{where}: expected a finite number, got {value!r}")
    return value


def load_annotations(path: str | Path) -> AnnotationSet:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise AnnotationError(f"{path}: top level must be an object")
    for key in ("images", "annotations"):
        if not isinstance(data.get(key), list):
            raise AnnotationError(f"{path}: field {key!r} must be a list")
    unknown: set[str] = set(data) - _TOP_KEYS
    ids = set()
    for i, img in enumerate(data["images"]):
        where = f"{path}: images[{i}]"
        if not isinstance(img, dict):
            raise AnnotationError(f"{where}: expected an object")
        for k in _IMAGE_KEYS:
            if k not in img:
                raise AnnotationError(f"{where}: missing field {k!r}")
        for k in ("width", "height"):
            if _check_number(img[k], f"{where}.{k}") <= 0:
                raise AnnotationError(f"{where}.{k}: must be positive")
        ids.add(img["id"])
        unknown |= {f"images.{k}" for k in set(img) - _IMAGE_KEYS}
    for i, ann in enumerate(data["annotations"]):
        where = f"{path}: annotations[{i}]"
        if not isinstance(ann, dict):
            raise AnnotationError(f"{where}: expected an object")
        for k in _ANN_KEYS:
            if k not in ann:
                raise AnnotationError(f"{where}: missing field {k!r}")
        bbox = ann["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise AnnotationError(f"{where}.bbox: expected [x, y, w, h]")
        for j, v in enumerate(bbox):
            _check_number(v, f"{where}.bbox[{j}]")
        if bbox[2] <= 0:
            raise AnnotationError(f"{where}.bbox: width must be positive, got {bbox[2]}")
        if bbox[3] <= 0:
            raise AnnotationError(f"{where}.bbox: height must be positive, got {bbox[3]}")
        if ann["image_id"] not in ids:
            raise AnnotationError(f"{where}.image_id: unknown image {ann['image_id']!r}")
        unknown |= {f"annotations.{k}" for k in set(ann) - _ANN_KEYS}
    if unknown:
        warnings.warn(f"{path}: preserving unknown fields {sorted(unknown)}")
    extra = {k: v for k, v in data.items() if k not in _TOP_KEYS}
    return AnnotationSet(data["images"], data["annotations"], data.get("categories", []), extra)


def samples_to_annotations(samples: Sequence[Sample], file_pattern: str = "images/{:05d}.png",
                           num_classes: int = 4) -> AnnotationSet:
    anns = AnnotationSet(categories=default_categories(num_classes))
    for s in samples:
        H, W = s.hr_size
        anns.images.append({"id": s.image_id, "file": file_pattern.format(s.image_id), "width": W, "height": H})
        for b in s.boxes:
            anns.annotations.append({"image_id": s.image_id, "class_id": b.class_id, "bbox": b.xywh(W, H)})
    return anns


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def write_png(path: str | Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.squeeze()).save(path)


def read_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def synthesize(cfg: DataConfig, seed: int, num_classes: int = 4) -> list[Sample]:
    """``cfg.count`` scenes (tiled when ``cfg.tile_size`` is set), each with its LR image."""
    spec = SceneSpec.from_config(cfg, num_classes)
    seeds = np.random.SeedSequence(seed).generate_state(max(cfg.count, 1))
    samples = []
    for i in range(cfg.count):
        scene = synth_scene(spec, int(seeds[i]), image_id=i)
        if cfg.tile_size:
            for t in tile(scene.hr_image, scene.boxes, cfg.tile_size, cfg.overlap):
                samples.append(Sample(t.image, t.boxes, image_id=len(samples)))
        else:
            scene.image_id = len(samples)
            samples.append(scene)
    return [s.with_lr() for s in samples]


def write_dataset(out_dir: str | Path, samples: Sequence[Sample], manifest: dict[str, Any],
                  num_classes: int = 4) -> None:
    out_dir = Path(out_dir)
    anns = samples_to_annotations(samples, num_classes=num_classes)
    for s, rec in zip(samples, anns.images):
        write_png(out_dir / rec["file"], s.hr_image)
    # the index is written last so a partial directory never looks complete
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    save_annotations(out_dir / "annotations.json", anns)


def load_dataset(root: str | Path) -> list[Sample]:
    root = Path(root)
    anns = load_annotations(root / "annotations.json")
    out = []
    for img in anns.images:
        hr = read_png(root / img["file"])
        out.append(Sample(hr, anns.boxes_for(img["id"]), image_id=img["id"]).with_lr())
    return out


def collate(samples: Sequence[Sample]) -> dict[str, Any]:
    """Stack a batch into channel-last tensors plus DETR-style target dicts (normalized cxcywh)."""
    for s in samples:
        s.with_lr()
    lr = torch.from_numpy(np.stack([s.lr_image for s in samples])).float()
    hr = torch.from_numpy(np.stack([s.hr_image for s in samples])).float()
    targets = []
    for s in samples:
        boxes = torch.tensor([[b.cx, b.cy, b.w, b.h] for b in s.boxes], dtype=torch.float32).reshape(-1, 4)
        labels = torch.tensor([b.class_id for b in s.boxes], dtype=torch.long)
        targets.append({"boxes": boxes, "labels": labels})
    return {"lr": lr, "hr": hr, "targets": targets, "image_ids": [s.image_id for s in samples]}
