"""OBB region types shared by the labeler, the objectives and the evaluator."""

from dataclasses import dataclass
from enum import IntEnum
from typing import Dict

import numpy as np

from .errors import DataError


class Region(IntEnum):
    """Per-pixel OBB class; the value is also the on-disk label value."""
    OBJECT = 0
    BACKGROUND = 1
    BOUNDARY = 2


@dataclass(frozen=True)
class OBBLabel:
    """Tri-class Object/Background/Boundary label, H x W uint8."""
    region: np.ndarray

    def __post_init__(self) -> None:
        if self.region.ndim != 2:
            raise DataError(f"OBB label must be 2-D, got shape {self.region.shape}")
        if self.region.size and int(self.region.max()) > int(Region.BOUNDARY):
            raise DataError(f"OBB label holds unknown value {int(self.region.max())}")

    @property
    def height(self) -> int:
        return int(self.region.shape[0])

    @property
    def width(self) -> int:
        return int(self.region.shape[1])

    def crop(self, top: int, left: int, size: int) -> "OBBLabel":
        return OBBLabel(self.region[top:top + size, left:left + size].copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OBBLabel):
            return NotImplemented
        return self.region.shape == other.region.shape and bool(np.array_equal(self.region, other.region))


@dataclass(frozen=True)
class MaskSet:
    """One-hot binary masks M_object, M_background, M_boundary (float32, H x W)."""
    object: np.ndarray
    background: np.ndarray
    boundary: np.ndarray
    d1: float = 0.0

    def __post_init__(self) -> None:
        shapes = {self.object.shape, self.background.shape, self.boundary.shape}
        if len(shapes) != 1:
            raise DataError(f"Mask shapes differ: {sorted(shapes)}")

    @property
    def shape(self) -> tuple:
        return self.object.shape

    def is_partition(self) -> bool:
        total = self.object + self.background + self.boundary
        return bool(np.all(total == 1.0))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {"object": self.object, "background": self.background, "boundary": self.boundary}
