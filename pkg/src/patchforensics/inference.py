"""Full-resolution prediction with optional flip TTA and per-image latency."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import preprocess
from .model import Detector, to_tensor
from .preprocess import NORM_MODES, check_stats, norm_mode, normalize  # noqa: F401  (re-export)
from .samples import ConfigError
from .training import TrainState

log = logging.getLogger(__name__)

TTA_OPS = ("hflip", "vflip", "hvflip", "rot90")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class StateError(RuntimeError):
    """Model state unusable for inference."""


@dataclass
class InferenceConfig:
    no_resize: bool = True
    # side length used only when no_resize is False
    resize_to: int = 256
    # None: reuse whatever the checkpoint was trained with
    normalization: Optional[str] = None
    stats: Optional[Sequence[float]] = None
    tta: bool = True
    tta_ops: tuple[str, ...] = ("hflip", "vflip")
    decision_threshold: float = 0.5

    def __post_init__(self):
        self.tta_ops = tuple(self.tta_ops)
        if self.normalization is not None:
            self.normalization = norm_mode(self.normalization)
        if self.stats is not None:
            self.stats = tuple(float(v) for v in check_stats(self.stats))
        if self.normalization == "dataset_stats" and self.stats is None:
            raise ConfigError("dataset_stats normalization requires stats")
        bad = [op for op in self.tta_ops if op not in TTA_OPS]
        if bad:
            raise ConfigError(f"unknown TTA ops {bad}")
        if self.tta and not self.tta_ops:
            raise ConfigError("tta enabled with no tta_ops")
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ConfigError("decision_threshold must be in [0, 1]")


@dataclass
class Prediction:
    image_id: str
    score: float
    label: int
    per_view_scores: list[float]
    elapsed_ms: float
    # nearest-neighbour upsampled decoder map, for inspection only
    loc_map: Optional[np.ndarray] = field(default=None, repr=False)


def _view(img: np.ndarray, op: str) -> np.ndarray:
    if op == "identity":
        return img
    if op == "hflip":
        return img[:, ::-1]
    if op == "vflip":
        return img[::-1]
    if op == "hvflip":
        return img[::-1, ::-1]
    if op == "rot90":
        return np.rot90(img)
    raise ValueError(op)


def _unview(m: np.ndarray, op: str) -> np.ndarray:
    return np.rot90(m, -1) if op == "rot90" else _view(m, op)


def _resolve(state: Union[TrainState, Detector]) -> tuple[Detector, Optional[object]]:
    if isinstance(state, TrainState):
        if state.epoch < 1:
            raise StateError("model state has not been trained")
        return state.model, state.config
    if isinstance(state, Detector):
        return state, None
    raise StateError(f"expected TrainState or Detector, got {type(state).__name__}")


def effective_norm(config: InferenceConfig, train_cfg) -> tuple[str, Optional[Sequence[float]]]:
    mode = config.normalization or (train_cfg.normalization if train_cfg is not None else "unit")
    stats = config.stats if config.stats is not None else getattr(train_cfg, "stats", None)
    if mode == "dataset_stats":
        stats = check_stats(stats)
    return mode, stats


def view_ops(config: InferenceConfig, shape: tuple[int, int]) -> list[str]:
    ops = ["identity"]
    if config.tta:
        for op in config.tta_ops:
            if op == "rot90" and shape[0] != shape[1]:
                raise ConfigError("rot90 TTA needs a square image")
            ops.append(op)
    return ops


@torch.no_grad()
def predict(image: np.ndarray, state: Union[TrainState, Detector], config: InferenceConfig = InferenceConfig(),
            image_id: str = "", inspect: Optional[Callable[[np.ndarray], None]] = None,
            with_map: bool = False) -> Prediction:
    """Score one RGB image; the score is the plain mean over the identity view and each TTA view.

    ``inspect`` receives each array exactly as handed to normalization, which
    lets callers confirm pixels were not resampled.
    """
    model, train_cfg = _resolve(state)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{image_id}: expected HxWx3 image, got {image.shape}")
    s = model.cfg.stride
    if image.shape[0] < s or image.shape[1] < s:
        raise ValueError(f"{image_id}: image {image.shape[:2]} smaller than one stride ({s})")
    mode, stats = effective_norm(config, train_cfg)
    dtype = next(model.parameters()).dtype
    model.eval()
    t0 = time.perf_counter()
    src = image if config.no_resize else preprocess.resample(image, config.resize_to)
    scores, maps = [], []
    for op in view_ops(config, src.shape[:2]):
        v = _view(src, op)
        if inspect is not None:
            inspect(v)
        x = to_tensor(normalize(v, mode, stats), dtype)
        pred, loc, _ = model(x)
        scores.append(float(pred[0]))
        if with_map:
            maps.append(_unview(loc[0].numpy(), op))
    score = float(np.mean(scores))
    elapsed = (time.perf_counter() - t0) * 1000.0
    loc_map = None
    if with_map:
        m = np.mean(maps, axis=0)
        loc_map = np.kron(m, np.ones((s, s), m.dtype))[:src.shape[0], :src.shape[1]]
    return Prediction(image_id, score, int(score >= config.decision_threshold), scores, elapsed, loc_map)


def list_images(directory: Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def predict_batch(directory: Path, state, config: InferenceConfig = InferenceConfig()) -> tuple[list[Prediction], dict]:
    """Predict every image in ``directory`` at its native size, one forward per image.

    Files that fail to decode are recorded under ``summary["errors"]``.
    """
    preds, errors = [], {}
    for path in list_images(directory):
        try:
            with Image.open(path) as im:
                img = np.asarray(im.convert("RGB"))
        except (UnidentifiedImageError, OSError) as e:
            errors[path.name] = str(e)
            log.warning("skipping %s: %s", path, e)
            continue
        try:
            preds.append(predict(img, state, config, image_id=path.stem))
        except ValueError as e:
            errors[path.name] = str(e)
            log.warning("skipping %s: %s", path, e)
    return preds, summarize(preds, errors)


def summarize(preds: Sequence[Prediction], errors: Optional[dict] = None) -> dict:
    lat = [p.elapsed_ms for p in preds]
    return {"count": len(preds), "mean_latency_ms": float(np.mean(lat)) if lat else 0.0, "errors": errors or {}}


def write_predictions(preds: Sequence[Prediction], path: Path, with_latency: bool = True) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    cols = ["image_id", "score", "label"] + (["elapsed_ms"] if with_latency else [])
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for p in preds:
            row = [p.image_id, repr(p.score), p.label]
            if with_latency:
                row.append(f"{p.elapsed_ms:.3f}")
            w.writerow(row)
    tmp.replace(path)
