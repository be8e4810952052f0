"""Pseudo-mask handling: ingestion, box calibration, crop-and-relabel, grid projection."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .samples import Box, DataError, ImageSample, IngestionError, PseudoMask, check_box

log = logging.getLogger(__name__)

GRID_RULES = ("mean", "max")


@dataclass
class BoxAnnotation:
    image_id: str
    boxes: list[Box] = field(default_factory=list)


def read_mask_file(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "I;16", "I", "F", "P"):
            raise IngestionError(f"{path}: expected a single-channel mask, got mode {im.mode}")
        if im.mode == "P":
            im = im.convert("L")
        arr = np.asarray(im)
        if im.mode == "1":
            return arr.astype(np.float32)
        if im.mode == "I;16":
            return arr.astype(np.float32) / 65535.0
        if im.mode in ("I", "F"):
            # float/int masks are taken as already-normalised or 8-bit scaled
            arr = arr.astype(np.float32)
            return arr / 255.0 if arr.max() > 1.0 else arr
        return arr.astype(np.float32) / 255.0


def ingest_masks(mask_dir: Path, samples: Sequence[ImageSample]) -> dict[str, PseudoMask]:
    """Pair externally produced masks (``<mask_dir>/<id>.png``) with ``samples``.

    A tampered sample without a mask file is an error.  An authentic sample
    without one gets an all-zero mask.
    """
    mask_dir = Path(mask_dir)
    out = {}
    for s in samples:
        path = mask_dir / f"{s.image_id}.png"
        h, w = s.size
        if not path.exists():
            if s.label:
                raise IngestionError(f"missing mask file for tampered image {s.image_id!r} ({path})")
            out[s.image_id] = PseudoMask.zeros(h, w, "auto", s.image_id)
            continue
        values = read_mask_file(path)
        if values.shape != (h, w):
            raise IngestionError(f"{path}: mask shape {values.shape} != image shape {(h, w)}")
        out[s.image_id] = PseudoMask(np.clip(values, 0.0, 1.0), "auto", s.image_id)
    return out


def write_mask(path: Path, mask: PseudoMask) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(mask.values * 255).astype(np.uint8), mode="L").save(path)


def read_boxes(path: Path) -> dict[str, BoxAnnotation]:
    """CSV ``image_id,x0,y0,x1,y1``; an id may repeat, one row per box.

    A row with empty coordinates declares an image with no boxes at all.
    """
    anns: dict[str, BoxAnnotation] = defaultdict(lambda: BoxAnnotation(""))
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"image_id", "x0", "y0", "x1", "y1"}:
            raise DataError(f"{path}: expected columns image_id,x0,y0,x1,y1")
        for row in reader:
            ann = anns[row["image_id"]]
            ann.image_id = row["image_id"]
            coords = [row[k].strip() for k in ("x0", "y0", "x1", "y1")]
            if all(coords):
                ann.boxes.append(Box(*(int(c) for c in coords)))
            elif any(coords):
                raise DataError(f"{path}: partial box row for {row['image_id']!r}")
    return dict(anns)


def write_boxes(path: Path, anns: Iterable[BoxAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "x0", "y0", "x1", "y1"])
        for ann in anns:
            if not ann.boxes:
                writer.writerow([ann.image_id, "", "", "", ""])
            for b in ann.boxes:
                writer.writerow([ann.image_id, *b])


def calibrate_with_boxes(mask: PseudoMask, ann: BoxAnnotation) -> PseudoMask:
    """Replace ``mask`` by the union of the annotated boxes."""
    if ann.image_id != mask.source_id:
        raise ValueError(f"annotation for {ann.image_id!r} applied to mask of {mask.source_id!r}")
    h, w = mask.shape
    values = np.zeros((h, w), np.float32)
    for b in ann.boxes:
        values[check_box(b, h, w).slices()] = 1.0
    return PseudoMask(values, "box_calibrated", mask.source_id)


def calibrate_dir(mask_dir: Path, boxes_file: Path, out_dir: Path) -> list[str]:
    """Apply every annotation in ``boxes_file`` to the matching mask file.

    Masks without annotations are copied through unchanged.  Returns the ids
    that were calibrated.
    """
    mask_dir, out_dir = Path(mask_dir), Path(out_dir)
    anns = read_boxes(boxes_file)
    done = []
    for path in sorted(mask_dir.glob("*.png")):
        rid = path.stem
        mask = PseudoMask(read_mask_file(path), "auto", rid)
        if rid in anns:
            mask = calibrate_with_boxes(mask, anns[rid])
            done.append(rid)
        write_mask(out_dir / path.name, mask)
    missing = sorted(set(anns) - {p.stem for p in mask_dir.glob("*.png")})
    if missing:
        raise DataError(f"annotations reference masks not found in {mask_dir}: {missing[:5]}")
    return done


def relabel(mask_crop: np.ndarray, overlap_threshold: float) -> int:
    tampered = int(np.count_nonzero(mask_crop > 0))
    return int(tampered >= 1 and tampered / mask_crop.size >= overlap_threshold)


def random_crop_with_label_reset(sample: ImageSample, crop_size: tuple[int, int], overlap_threshold: float,
                                 rng_seed) -> ImageSample:
    """Crop image and mask at the same seeded offset and recompute the label from the cropped mask.

    ``rng_seed`` is anything accepted by ``np.random.default_rng``.
    """
    if sample.mask is None:
        raise DataError(f"{sample.image_id}: crop-relabel needs a mask")
    ch, cw = crop_size
    h, w = sample.size
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise ValueError(f"crop {ch}x{cw} does not fit image {sample.image_id} of size {h}x{w}")
    rng = np.random.default_rng(rng_seed)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    m = sample.mask.values[y0:y0 + ch, x0:x0 + cw]
    new_mask = replace(sample.mask, values=m.copy())
    meta = dict(sample.meta, crop_origin=(x0, y0))
    return replace(sample, image=sample.image[y0:y0 + ch, x0:x0 + cw].copy(), mask=new_mask,
                   label=relabel(m, overlap_threshold), meta=meta)


def mask_to_grid(mask: PseudoMask | np.ndarray, grid_h: int, grid_w: int, rule: str = "max") -> np.ndarray:
    """Aggregate pixel blocks onto a ``grid_h x grid_w`` grid.

    Cell (i, j) covers rows ``[floor(i*H/gh), floor((i+1)*H/gh))`` and the
    analogous columns, so uneven divisions spread the remainder.
    """
    values = mask.values if isinstance(mask, PseudoMask) else np.asarray(mask, np.float32)
    if rule not in GRID_RULES:
        raise ValueError(f"rule must be one of {GRID_RULES}")
    h, w = values.shape
    if not (1 <= grid_h <= h and 1 <= grid_w <= w):
        raise ValueError(f"grid {grid_h}x{grid_w} incompatible with mask {h}x{w}")
    if h % grid_h == 0 and w % grid_w == 0:
        blocks = values.reshape(grid_h, h // grid_h, grid_w, w // grid_w)
        out = blocks.max(axis=(1, 3)) if rule == "max" else blocks.mean(axis=(1, 3))
        return out.astype(np.float32)
    ys = (np.arange(grid_h + 1) * h) // grid_h
    xs = (np.arange(grid_w + 1) * w) // grid_w
    agg = np.max if rule == "max" else np.mean
    out = np.empty((grid_h, grid_w), np.float32)
    for i in range(grid_h):
        for j in range(grid_w):
            out[i, j] = agg(values[ys[i]:ys[i + 1], xs[j]:xs[j + 1]])
    return out


def boxes_from_mask(mask: np.ndarray, image_id: str, pad: int = 0) -> BoxAnnotation:
    """Bounding boxes of connected components; stands in for a human drawing boxes."""
    labels, n = ndimage.label(np.asarray(mask) > 0.5)
    h, w = labels.shape
    boxes = []
    for sl in ndimage.find_objects(labels):
        ys, xs = sl
        boxes.append(Box(max(0, xs.start - pad), max(0, ys.start - pad), min(w, xs.stop + pad), min(h, ys.stop + pad)))
    return BoxAnnotation(image_id, boxes)


def simulate_auto_mask(gt: np.ndarray, rng: np.random.Generator, dilation: int = 6, n_blobs: int = 3,
                       blob_radius: tuple[int, int] = (8, 24), drop_target: bool = False) -> np.ndarray:
    """Imitate a localizer that is poor on small targets.

    The GT region is dilated, and ``n_blobs`` random background ellipses are
    marked as forged.  With ``drop_target`` the true region is missed entirely.
    """
    gt = np.asarray(gt) > 0
    h, w = gt.shape
    out = np.zeros((h, w), bool) if drop_target else ndimage.binary_dilation(gt, iterations=dilation) if dilation else gt.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        ry, rx = rng.integers(blob_radius[0], blob_radius[1] + 1, size=2)
        out |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return out.astype(np.float32)


def attach_masks(samples: Sequence[ImageSample], masks: Mapping[str, PseudoMask]) -> list[ImageSample]:
    out = []
    for s in samples:
        if s.image_id not in masks:
            raise DataError(f"no pseudo-mask for sample {s.image_id!r}")
        out.append(s.with_mask(masks[s.image_id]))
    return out
