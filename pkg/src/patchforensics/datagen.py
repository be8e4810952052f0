"""Procedural "typical target" scenes and splice / copy-move / removal tampering.

Scenes are smooth terrain with rectangular and elliptical targets, passed
through a simulated capture that leaves a faint per-pixel checkerboard trace
(think demosaicing residue) plus sensor noise.  Tampering either imports
pixels captured by a different device (splice), shifts the trace phase
(copy-move at an odd offset) or wipes it (removal fills).  That gives a
local, RGB-only statistic that a small CNN can pick up, which is all the
learning machinery downstream needs.

The tamper-type mix and all magnitudes here are stand-ins; they do not
describe any real benchmark.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .samples import Box, ConfigError, DataError, ImageSample, PseudoMask, check_box

log = logging.getLogger(__name__)

TAMPER_TYPES = ("splice", "copy_move", "removal", "none")
FILL_MODES = ("mean", "blur", "noise")
# per-channel sign of the capture trace (R, G, B)
_TRACE_SIGN = np.array([-1.0, 1.0, -1.0], np.float32)


@dataclass
class DatagenConfig:
    n_real: int = 100
    n_fake: int = 100
    size_range: tuple[int, int] = (256, 512)
    types: tuple[str, ...] = ("splice", "copy_move", "removal")
    # fraction of tampered records whose target is a small object
    small_fraction: float = 0.15
    small_size: tuple[int, int] = (6, 12)
    large_size: tuple[int, int] = (32, 80)
    large_area_ratio: float = 4.0
    n_objects: tuple[int, int] = (2, 6)
    # checkerboard trace amplitude and sensor noise sigma, in 8-bit levels
    trace_amplitude: tuple[float, float] = (9.0, 18.0)
    noise_sigma: tuple[float, float] = (2.0, 5.0)

    def __post_init__(self):
        self.size_range = tuple(self.size_range)
        self.types = tuple(self.types)
        self.small_size = tuple(self.small_size)
        self.large_size = tuple(self.large_size)
        self.n_objects = tuple(self.n_objects)
        self.trace_amplitude = tuple(self.trace_amplitude)
        self.noise_sigma = tuple(self.noise_sigma)
        lo, hi = self.size_range
        if lo > hi:
            raise ConfigError(f"size_range min {lo} > max {hi}")
        if lo < 32:
            raise ConfigError("images must be at least 32 px")
        if self.n_real < 0 or self.n_fake < 0:
            raise ConfigError("record counts must be non-negative")
        bad = [t for t in self.types if t not in TAMPER_TYPES or t == "none"]
        if bad or (self.n_fake and not self.types):
            raise ConfigError(f"invalid tamper types {bad or self.types}")
        if not 0.0 <= self.small_fraction <= 1.0:
            raise ConfigError("small_fraction must be in [0, 1]")
        for name in ("small_size", "large_size", "n_objects", "trace_amplitude", "noise_sigma"):
            a, b = getattr(self, name)
            if a > b:
                raise ConfigError(f"{name}: min {a} > max {b}")
        if self.large_size[0] ** 2 < self.large_area_ratio * self.small_size[0] ** 2:
            raise ConfigError("large objects must have area >= large_area_ratio x min small area")
        if self.large_size[1] + 4 > lo // 2:
            raise ConfigError("large_size too big for the smallest image size")

    @classmethod
    def from_dict(cls, d: dict) -> "DatagenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown datagen keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SceneObject:
    kind: str  # "large" | "small"
    box: Box
    shape: str  # "rect" | "ellipse"
    color: tuple[float, float, float]


@dataclass
class SyntheticScene:
    background: np.ndarray  # float32 (H, W, 3), clean render with objects drawn
    objects: list[SceneObject] = field(default_factory=list)


@dataclass
class TamperRecord:
    record_id: str
    image: np.ndarray  # uint8 (H, W, 3)
    gt_mask: np.ndarray  # uint8 (H, W), 0/1
    tamper_type: str
    label: int
    target_kind: str = "none"  # size class of the tampered object
    box: Optional[Box] = None  # tampered region (destination for copy-move)

    def to_sample(self, with_mask: bool = True) -> ImageSample:
        mask = PseudoMask(self.gt_mask.astype(np.float32), "synthetic_gt", self.record_id) if with_mask else None
        meta = {"target_kind": self.target_kind, "box": self.box}
        return ImageSample(self.record_id, self.image, self.label, mask, self.tamper_type, meta)


def record_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(index)])


# ---------------------------------------------------------------------------
# tamper primitives


def _check_rgb(img: np.ndarray, name: str) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must be HxWx3, got {img.shape}")
    return img


def tamper_splice(target: np.ndarray, donor: np.ndarray, box: Box, seed: int = 0,
                  jitter: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Paste ``donor[box]`` into ``target[box]``.

    ``jitter`` adds a seeded per-channel brightness offset in [-jitter, jitter]
    to the pasted pixels; 0 pastes them verbatim.
    """
    target = _check_rgb(target, "target")
    donor = _check_rgb(donor, "donor")
    h, w = target.shape[:2]
    box = check_box(box, h, w)
    check_box(box, *donor.shape[:2], what="box (donor)")
    out = target.copy()
    mask = np.zeros((h, w), np.uint8)
    if box.area == 0:
        return out, mask
    sy, sx = box.slices()
    patch = donor[sy, sx].astype(np.float32)
    if jitter:
        rng = np.random.default_rng(seed)
        patch = patch + rng.uniform(-jitter, jitter, size=3).astype(np.float32)
    out[sy, sx] = np.clip(np.rint(patch), 0, 255).astype(target.dtype)
    mask[sy, sx] = 1
    return out, mask


def tamper_copy_move(image: np.ndarray, src_box: Box, dst_origin: tuple[int, int], seed: int = 0,
                     jitter: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Copy ``image[src_box]`` so its top-left lands at ``dst_origin = (x, y)``.

    Only the destination region is marked in the mask.  Overlapping source and
    destination read from the untouched original.
    """
    image = _check_rgb(image, "image")
    h, w = image.shape[:2]
    src_box = check_box(src_box, h, w, "src_box")
    dx, dy = int(dst_origin[0]), int(dst_origin[1])
    dst = check_box(Box(dx, dy, dx + src_box.width, dy + src_box.height), h, w, "destination")
    out, mask = tamper_splice(image, image, Box(0, 0, 0, 0))
    if src_box.area == 0:
        return out, mask
    patch = image[src_box.slices()].astype(np.float32)
    if jitter:
        rng = np.random.default_rng(seed)
        patch = patch + rng.uniform(-jitter, jitter, size=3).astype(np.float32)
    out[dst.slices()] = np.clip(np.rint(patch), 0, 255).astype(image.dtype)
    mask[dst.slices()] = 1
    return out, mask


def tamper_removal(image: np.ndarray, box: Box, fill: str = "mean", seed: int = 0,
                   noise_sigma: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
    """Erase ``image[box]`` with a flat mean, a heavy blur, or mean plus noise."""
    image = _check_rgb(image, "image")
    if fill not in FILL_MODES:
        raise ValueError(f"fill must be one of {FILL_MODES}, got {fill!r}")
    h, w = image.shape[:2]
    box = check_box(box, h, w)
    out = image.copy()
    mask = np.zeros((h, w), np.uint8)
    if box.area == 0:
        return out, mask
    sy, sx = box.slices()
    region = image[sy, sx].astype(np.float64)
    mean = region.reshape(-1, 3).mean(axis=0)
    if fill == "mean":
        new = np.broadcast_to(mean, region.shape)
    elif fill == "blur":
        sigma = max(box.width, box.height) / 2.0
        # blur a margin around the box so the fill bleeds in from the surroundings
        m = int(np.ceil(2 * sigma))
        y0, y1 = max(0, box.y0 - m), min(h, box.y1 + m)
        x0, x1 = max(0, box.x0 - m), min(w, box.x1 + m)
        blurred = ndimage.gaussian_filter(image[y0:y1, x0:x1].astype(np.float64), (sigma, sigma, 0), mode="nearest")
        new = blurred[box.y0 - y0:box.y1 - y0, box.x0 - x0:box.x1 - x0]
    else:
        rng = np.random.default_rng(seed)
        new = mean + rng.normal(0.0, noise_sigma, size=region.shape)
    out[sy, sx] = np.clip(np.rint(new), 0, 255).astype(image.dtype)
    mask[sy, sx] = 1
    return out, mask


# ---------------------------------------------------------------------------
# scene rendering


def _terrain(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(60, 190, size=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)[..., None] * rng.uniform(-30, 30, size=3)
    low = rng.normal(size=(h // 8 + 1, w // 8 + 1, 3))
    low = ndimage.gaussian_filter(low, (2.5, 2.5, 0))
    low = ndimage.zoom(low, (8, 8, 1), order=1)[:h, :w]
    low *= rng.uniform(20, 45) / (low.std() + 1e-6)
    return (base + ramp + low).astype(np.float32)


def _draw(canvas: np.ndarray, obj: SceneObject) -> None:
    sy, sx = obj.box.slices()
    bh, bw = obj.box.height, obj.box.width
    if obj.shape == "rect":
        sel = np.ones((bh, bw), bool)
    else:
        yy, xx = np.mgrid[0:bh, 0:bw]
        sel = ((yy + 0.5 - bh / 2) / (bh / 2)) ** 2 + ((xx + 0.5 - bw / 2) / (bw / 2)) ** 2 <= 1.0
    shade = np.linspace(0.85, 1.1, bw, dtype=np.float32)[None, :, None]
    fill = np.broadcast_to(np.asarray(obj.color, np.float32) * shade, (bh, bw, 3))
    canvas[sy, sx][sel] = fill[sel]


def _place(rng: np.random.Generator, h: int, w: int, side: tuple[int, int], margin: int = 2) -> Box:
    bh, bw = (int(rng.integers(side[0], side[1] + 1)) for _ in range(2))
    y0 = int(rng.integers(margin, h - bh - margin + 1))
    x0 = int(rng.integers(margin, w - bw - margin + 1))
    return Box(x0, y0, x0 + bw, y0 + bh)


def _make_object(rng: np.random.Generator, h: int, w: int, kind: str, cfg: DatagenConfig) -> SceneObject:
    side = cfg.large_size if kind == "large" else cfg.small_size
    color = tuple(float(c) for c in rng.uniform(20, 235, size=3))
    return SceneObject(kind, _place(rng, h, w, side), str(rng.choice(["rect", "ellipse"])), color)


def render_scene(rng: np.random.Generator, h: int, w: int, cfg: DatagenConfig,
                 forced: Sequence[SceneObject] = ()) -> SyntheticScene:
    canvas = _terrain(rng, h, w)
    objects = []
    for _ in range(int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))):
        kind = "small" if rng.random() < 0.5 else "large"
        objects.append(_make_object(rng, h, w, kind, cfg))
    objects.extend(forced)
    for obj in objects:
        _draw(canvas, obj)
    return SyntheticScene(canvas, objects)


def capture(clean: np.ndarray, rng: np.random.Generator, amplitude: float, sigma: float,
            phase: int = 0) -> np.ndarray:
    """Simulated acquisition: checkerboard trace of the given amplitude and phase, noise, 8-bit quantization."""
    h, w = clean.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    checker = np.where((yy + xx + phase) % 2 == 0, 1.0, -1.0).astype(np.float32)
    img = clean + amplitude * checker[..., None] * _TRACE_SIGN + rng.normal(0.0, sigma, size=clean.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _pad_box(box: Box, pad: int, h: int, w: int) -> Box:
    return Box(max(0, box.x0 - pad), max(0, box.y0 - pad), min(w, box.x1 + pad), min(h, box.y1 + pad))


def _make_record(cfg: DatagenConfig, seed: int, index: int, tampered: bool) -> TamperRecord:
    rng = np.random.default_rng(record_seed(seed, index))
    rid = f"{index:05d}"
    h, w = (int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1)) for _ in range(2))
    amp = rng.uniform(*cfg.trace_amplitude)
    sigma = rng.uniform(*cfg.noise_sigma)
    if not tampered:
        scene = render_scene(rng, h, w, cfg)
        img = capture(scene.background, rng, amp, sigma)
        return TamperRecord(rid, img, np.zeros((h, w), np.uint8), "none", 0)

    ttype = str(rng.choice(list(cfg.types)))
    kind = "small" if rng.random() < cfg.small_fraction else "large"
    op_seed = int(rng.integers(2**31))
    if ttype == "splice":
        scene = render_scene(rng, h, w, cfg)
        img = capture(scene.background, rng, amp, sigma)
        target = _make_object(rng, h, w, kind, cfg)
        box = _pad_box(target.box, 1, h, w)
        donor_scene = render_scene(rng, h, w, cfg, forced=[target])
        # foreign device: no trace or a weak one in opposite phase, different noise floor
        donor_amp = rng.choice([0.0, rng.uniform(0.0, cfg.trace_amplitude[0] * 0.5)])
        donor = capture(donor_scene.background, rng, donor_amp, rng.uniform(*cfg.noise_sigma), phase=1)
        img, mask = tamper_splice(img, donor, box, op_seed)
    else:
        target = _make_object(rng, h, w, kind, cfg)
        scene = render_scene(rng, h, w, cfg, forced=[target])
        img = capture(scene.background, rng, amp, sigma)
        if ttype == "copy_move":
            src = _pad_box(target.box, 1, h, w)
            # odd total displacement flips the trace phase inside the pasted region
            while True:
                dx = int(rng.integers(0, w - src.width + 1))
                dy = int(rng.integers(0, h - src.height + 1))
                if (dx - src.x0 + dy - src.y0) % 2 == 1:
                    break
            img, mask = tamper_copy_move(img, src, (dx, dy), op_seed)
            box = Box(dx, dy, dx + src.width, dy + src.height)
        else:
            box = _pad_box(target.box, 2, h, w)
            fill = str(rng.choice(FILL_MODES))
            img, mask = tamper_removal(img, box, fill, op_seed)
    return TamperRecord(rid, img, mask, ttype, 1, kind, box)


def generate_dataset(config: DatagenConfig, seed: int) -> list[TamperRecord]:
    """Build ``n_real + n_fake`` records; class slots are shuffled by ``seed``."""
    n = config.n_real + config.n_fake
    order = np.random.default_rng(record_seed(seed, -1 & 0xFFFFFFFF)).permutation(n)
    is_fake = np.zeros(n, bool)
    is_fake[order[:config.n_fake]] = True
    return [_make_record(config, seed, i, bool(is_fake[i])) for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk layout: images/<id>.png, masks/<id>.png (0/255), labels.csv


def write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, optimize=False)


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_dataset(records: Sequence[TamperRecord], out: Path) -> Path:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "tamper_type"])
        for rec in records:
            write_png(out / "images" / f"{rec.record_id}.png", rec.image)
            write_png(out / "masks" / f"{rec.record_id}.png", (rec.gt_mask * 255).astype(np.uint8))
            writer.writerow([rec.record_id, rec.label, rec.tamper_type])
    log.info("wrote %d records to %s", len(records), out)
    return out


def read_labels(data_dir: Path) -> list[tuple[str, int, str]]:
    path = Path(data_dir) / "labels.csv"
    if not path.exists():
        raise DataError(f"no labels.csv in {data_dir}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"id", "label", "tamper_type"}:
        raise DataError(f"{path}: expected columns id,label,tamper_type")
    return [(r["id"], int(r["label"]), r["tamper_type"]) for r in rows]


def load_dataset(data_dir: Path) -> list[ImageSample]:
    """Load images and labels; masks are attached separately (see ``maskops.ingest_masks``)."""
    data_dir = Path(data_dir)
    samples = []
    for rid, label, ttype in read_labels(data_dir):
        img_path = data_dir / "images" / f"{rid}.png"
        if not img_path.exists():
            raise DataError(f"missing image {img_path}")
        samples.append(ImageSample(rid, read_rgb(img_path), label, None, ttype))
    return samples
