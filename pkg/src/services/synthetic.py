"""Deterministic synthetic scenes with pixel-exact segmentation.

A scene is sky above a horizon row, a plant band, ground and a water pool
below it, plus rectangle/ellipse objects painted on top. Each region gets a
texture with different frequency content so that region-scoped metrics
differ in tests.
"""

import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from ..core.config import MANIFEST_NAME, CLASS_MAP_NAME
from ..core.errors import ConfigError, DataError
from ..core.imaging import quantize, save_image
from ..core.utils import ensure_dir
from .obb_labeler import (
    ClassInfo,
    ClassMap,
    OBBLabeler,
    SegmentationLabel,
    obb_labeler,
    save_class_map,
    save_obb,
    save_segmentation,
)

logger = logging.getLogger("tpsr.synthetic")

MIN_SCENE_SIZE = 32
SHAPE_KINDS = ("rectangle", "ellipse")

SYNTH_CLASS_MAP = ClassMap((
    ClassInfo(0, "sky", "sky", (135, 190, 235)),
    ClassInfo(1, "plant", "plant", (40, 140, 50)),
    ClassInfo(2, "ground", "ground", (120, 90, 60)),
    ClassInfo(3, "water", "water", (30, 80, 160)),
    ClassInfo(4, "building", "building", (180, 180, 175)),
    ClassInfo(5, "person", "person", (220, 60, 60)),
    ClassInfo(6, "car", "vehicle", (240, 200, 40)),
))
OBJECT_CLASSES = ("building", "person", "car")
_ID = {info.name: info.id for info in SYNTH_CLASS_MAP.classes}


@dataclass(frozen=True)
class ShapeSpec:
    """Axis-aligned rectangle or ellipse centred at (cy, cx) with half extents."""
    kind: str
    class_name: str
    cy: int
    cx: int
    half_h: int
    half_w: int

    def __post_init__(self) -> None:
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"Unknown shape kind '{self.kind}'")
        if self.class_name not in OBJECT_CLASSES:
            raise ConfigError(f"'{self.class_name}' is not an object class ({', '.join(OBJECT_CLASSES)})")
        if self.half_h < 1 or self.half_w < 1:
            raise ConfigError("Shape half extents must be >= 1")

    def indicator(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        dy = (yy - self.cy) / self.half_h
        dx = (xx - self.cx) / self.half_w
        if self.kind == "rectangle":
            return (np.abs(dy) <= 1.0) & (np.abs(dx) <= 1.0)
        return dy * dy + dx * dx <= 1.0

    def fits(self, height: int, width: int) -> bool:
        return (
            self.cy - self.half_h >= 0 and self.cy + self.half_h < height
            and self.cx - self.half_w >= 0 and self.cx + self.half_w < width
        )


@dataclass(frozen=True)
class SceneSpec:
    size: int = 128
    seed: int = 0
    horizon: float = 0.4
    n_objects: int = 3
    shape_family: str = "mixed"
    shapes: Optional[Tuple[ShapeSpec, ...]] = None

    def __post_init__(self) -> None:
        if self.size < MIN_SCENE_SIZE:
            raise ConfigError(f"Scene size must be >= {MIN_SCENE_SIZE}, got {self.size}")
        if not 0.0 < self.horizon < 1.0:
            raise ConfigError(f"horizon must lie in (0, 1), got {self.horizon}")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be non-negative")
        if self.shape_family not in ("rectangles", "ellipses", "mixed"):
            raise ConfigError(f"shape_family must be rectangles, ellipses or mixed, got '{self.shape_family}'")


def _random_shapes(spec: SceneSpec, rng: np.random.Generator) -> Tuple[ShapeSpec, ...]:
    kinds = {"rectangles": ("rectangle",), "ellipses": ("ellipse",), "mixed": SHAPE_KINDS}[spec.shape_family]
    shapes = []
    largest = max(spec.size // 6, 4)
    for _ in range(spec.n_objects):
        half_h = int(rng.integers(3, largest + 1))
        half_w = int(rng.integers(3, largest + 1))
        shapes.append(ShapeSpec(
            kind=kinds[int(rng.integers(len(kinds)))],
            class_name=OBJECT_CLASSES[int(rng.integers(len(OBJECT_CLASSES)))],
            cy=int(rng.integers(half_h, spec.size - half_h)),
            cx=int(rng.integers(half_w, spec.size - half_w)),
            half_h=half_h,
            half_w=half_w,
        ))
    return tuple(shapes)


def _layout(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.size
    ids = np.full((size, size), _ID["ground"], dtype=np.int64)
    horizon = int(round(spec.horizon * size))
    band = int(rng.integers(2, max(size // 8, 3)))
    pool_top = horizon + (size - horizon) // 2
    pool_width = int(rng.integers(size // 4, size // 2 + 1))

    ids[:horizon] = _ID["sky"]
    ids[horizon:horizon + band] = _ID["plant"]
    ids[pool_top:, :pool_width] = _ID["water"]
    return ids


def _texture(ids: np.ndarray, colors: Dict[int, np.ndarray], rng: np.random.Generator) -> np.ndarray:
    size_h, size_w = ids.shape
    img = np.zeros((size_h, size_w, 3), dtype=np.float64)
    yy, xx = np.mgrid[0:size_h, 0:size_w]

    for class_id, color in colors.items():
        region = ids == class_id
        if not region.any():
            continue
        name = SYNTH_CLASS_MAP.name_of(class_id)
        base = np.broadcast_to(color, img.shape).copy()
        if name == "sky":
            base *= (0.75 + 0.25 * yy / max(size_h - 1, 1))[:, :, None]
        elif name in ("plant", "ground"):
            base += rng.normal(0.0, 0.12, size=img.shape)
        elif name == "water":
            base += 0.06 * np.sin(xx / 2.0 + yy / 5.0)[:, :, None]
        else:
            base *= (0.85 + 0.15 * xx / max(size_w - 1, 1))[:, :, None]
        img[region] = base[region]
    return img


def generate_scene(spec: SceneSpec) -> Tuple[np.ndarray, SegmentationLabel]:
    """Render an image (8-bit exact, float32 in [0, 1]) and its class-id segmentation."""
    rng = np.random.default_rng(spec.seed)
    ids = _layout(spec, rng)

    shapes = spec.shapes if spec.shapes is not None else _random_shapes(spec, rng)
    for shape in shapes:
        if not shape.fits(spec.size, spec.size):
            raise ConfigError(f"Shape {shape} does not fit a {spec.size}x{spec.size} canvas")
        ids[shape.indicator(spec.size, spec.size)] = _ID[shape.class_name]

    colors = {info.id: np.asarray(info.color, dtype=np.float64) / 255.0 for info in SYNTH_CLASS_MAP.classes}
    img = _texture(ids, colors, rng)
    img = quantize(img).astype(np.float32) / np.float32(255.0)
    return img, SegmentationLabel(ids, SYNTH_CLASS_MAP)


def generate_corpus(
    n: int,
    template: SceneSpec,
    out_dir: str,
    labeler: Optional[OBBLabeler] = None,
) -> str:
    """Write n scenes (hr/, seg/ with classes.json, obb/) and a manifest; return its path.

    Scene i uses seed ``template.seed + i``.
    """
    if n < 0:
        raise ConfigError(f"Scene count must be non-negative, got {n}")
    labeler = labeler or obb_labeler
    dirs = {name: os.path.join(out_dir, name) for name in ("hr", "seg", "obb")}
    for path in dirs.values():
        ensure_dir(path)
    save_class_map(SYNTH_CLASS_MAP, os.path.join(dirs["seg"], CLASS_MAP_NAME))

    lines = []
    for i in range(n):
        img, seg = generate_scene(replace(template, seed=template.seed + i))
        name = f"scene_{i:04d}.png"
        save_image(img, os.path.join(dirs["hr"], name))
        save_segmentation(seg, os.path.join(dirs["seg"], name))
        save_obb(labeler.build_obb_label(seg), os.path.join(dirs["obb"], name))
        lines.append(json.dumps({"hr": f"hr/{name}", "obb": f"obb/{name}"}, sort_keys=True))

    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    try:
        with open(manifest_path, "w", encoding="utf-8") as f:
            f.write("".join(line + "\n" for line in lines))
    except OSError as e:
        raise DataError(f"Could not write manifest: {manifest_path}: {e}") from e

    logger.info(f"Generated {n} synthetic scenes ({template.size}x{template.size}) in {out_dir}")
    return manifest_path
