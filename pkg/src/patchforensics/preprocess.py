"""Input normalization and the (opt-in) resampling path shared by training and inference."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .samples import ConfigError

NORM_MODES = ("unit", "dataset_stats", "per_image")
_CLI_NORM = {"unit": "unit", "stats": "dataset_stats", "per-image": "per_image"}

# Every call that resamples pixel data bumps this; the no-resize path must leave it untouched.
RESAMPLE_CALLS = 0


def norm_mode(name: str) -> str:
    name = _CLI_NORM.get(name, name)
    if name not in NORM_MODES:
        raise ConfigError(f"unknown normalization {name!r}")
    return name


def check_stats(stats: Optional[Sequence[float]]) -> np.ndarray:
    if stats is None:
        raise ConfigError("dataset_stats normalization requires per-channel mean/std")
    stats = np.asarray(stats, np.float64).reshape(-1)
    if stats.shape != (6,):
        raise ConfigError(f"stats must hold 3 means and 3 stds, got {stats.size} values")
    if np.any(stats[3:] <= 0):
        raise ConfigError("stats std must be positive")
    return stats


def normalize(image: np.ndarray, mode: str = "unit", stats: Optional[Sequence[float]] = None) -> np.ndarray:
    """uint8-valued (H, W, 3) -> float (H, W, 3).

    unit: x / 255; dataset_stats: (x / 255 - mean_c) / std_c;
    per_image: (x - mean_c) / (std_c + 1e-8) over this image's pixels.
    """
    mode = norm_mode(mode)
    x = np.asarray(image, np.float64)
    if mode == "unit":
        return x / 255.0
    if mode == "dataset_stats":
        s = check_stats(stats)
        return (x / 255.0 - s[:3]) / s[3:]
    mu = x.reshape(-1, 3).mean(0)
    sd = x.reshape(-1, 3).std(0)
    return (x - mu) / (sd + 1e-8)


def compute_stats(images) -> np.ndarray:
    """Per-channel mean/std of x/255 over all pixels of ``images`` (iterable of HxWx3 arrays)."""
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for img in images:
        x = np.asarray(img, np.float64).reshape(-1, 3) / 255.0
        total += x.sum(0)
        sq += (x * x).sum(0)
        n += x.shape[0]
    if n == 0:
        raise ValueError("no pixels to compute statistics from")
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean**2, 0.0))
    return np.concatenate([mean, std])


def write_stats(path: Path, stats: Sequence[float]) -> None:
    stats = check_stats(stats)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mean_r", "mean_g", "mean_b", "std_r", "std_g", "std_b"])
        w.writerow([repr(float(v)) for v in stats])


def read_stats(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise ConfigError(f"{path}: expected exactly one stats row")
    keys = ["mean_r", "mean_g", "mean_b", "std_r", "std_g", "std_b"]
    try:
        return check_stats([float(rows[0][k]) for k in keys])
    except KeyError as e:
        raise ConfigError(f"{path}: missing column {e}") from None


def resample(image: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    """Resize to ``size x size``; only used when a run explicitly turns resizing on."""
    global RESAMPLE_CALLS
    RESAMPLE_CALLS += 1
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        mode = Image.NEAREST if nearest else Image.BILINEAR
        return np.asarray(Image.fromarray(arr.astype(np.float32)).resize((size, size), mode))
    return np.asarray(Image.fromarray(arr).resize((size, size), Image.NEAREST if nearest else Image.BILINEAR))
