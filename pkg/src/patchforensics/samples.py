"""Core records shared across the pipeline: boxes, pseudo-masks and samples."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Malformed or missing input data."""


class IngestionError(DataError):
    """A pseudo-mask file could not be paired with its image."""


class Box(NamedTuple):
    """Axis-aligned rectangle in pixel coords, inclusive-exclusive: [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return max(0, self.x1 - self.x0)

    @property
    def height(self) -> int:
        return max(0, self.y1 - self.y0)

    @property
    def area(self) -> int:
        return self.width * self.height

    def within(self, height: int, width: int) -> bool:
        return (0 <= self.x0 <= self.x1 <= width) and (0 <= self.y0 <= self.y1 <= height)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


def check_box(box: Box, height: int, width: int, what: str = "box") -> Box:
    box = Box(*(int(v) for v in box))
    if not box.within(height, width):
        raise ValueError(f"{what} {tuple(box)} outside image bounds {height}x{width}")
    return box


PROVENANCES = ("auto", "box_calibrated", "synthetic_gt")


@dataclass
class PseudoMask:
    values: np.ndarray
    provenance: str = "auto"
    source_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {self.values.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown mask provenance {self.provenance!r}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise DataError(f"mask values for {self.source_id!r} outside [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def zeros(cls, height: int, width: int, provenance: str = "auto", source_id: str = "") -> "PseudoMask":
        return cls(np.zeros((height, width), np.float32), provenance, source_id)


@dataclass
class ImageSample:
    """RGB uint8 image (H, W, 3) with image-level label and optional pseudo-mask."""

    image_id: str
    image: np.ndarray
    label: int
    mask: Optional[PseudoMask] = None
    tamper_type: str = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.image_id}: expected HxWx3 RGB image, got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise DataError(
                f"{self.image_id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
            )

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def with_mask(self, mask: Optional[PseudoMask]) -> "ImageSample":
        return replace(self, mask=mask)
