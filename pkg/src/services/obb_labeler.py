"""OBB labeling service: segmentation labels -> Object/Background/Boundary labels."""

import glob
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from ..core.config import BACKGROUND_CLASSES, CLASS_MAP_NAME, D1, UNLABELED
from ..core.errors import ConfigError, DataError
from ..core.imaging import read_png_raw, write_png_raw
from ..core.regions import MaskSet, OBBLabel, Region
from ..core.utils import ensure_dir

logger = logging.getLogger("tpsr.obb")


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    supercategory: Optional[str] = None
    color: Optional[Tuple[int, int, int]] = None


@dataclass(frozen=True)
class ClassMap:
    """Dataset taxonomy: class id -> name (+ optional supercategory and colour)."""
    classes: Tuple[ClassInfo, ...]

    def name_of(self, class_id: int) -> str:
        for info in self.classes:
            if info.id == class_id:
                return info.name
        return UNLABELED

    def ids_matching(self, name: str) -> List[int]:
        """Ids whose class name or supercategory equals ``name``."""
        return [info.id for info in self.classes if name in (info.name, info.supercategory)]

    def to_json(self) -> Dict:
        entries = []
        for info in self.classes:
            entry: Dict = {"id": info.id, "name": info.name}
            if info.supercategory is not None:
                entry["supercategory"] = info.supercategory
            if info.color is not None:
                entry["color"] = list(info.color)
            entries.append(entry)
        return {"classes": entries}

    @classmethod
    def from_json(cls, data: Dict) -> "ClassMap":
        if "classes" in data:
            infos = tuple(
                ClassInfo(
                    id=int(entry["id"]),
                    name=str(entry["name"]),
                    supercategory=entry.get("supercategory"),
                    color=tuple(entry["color"]) if entry.get("color") is not None else None,
                )
                for entry in data["classes"]
            )
        else:
            infos = tuple(ClassInfo(id=int(k), name=str(v)) for k, v in data.items())
        return cls(infos)

    @classmethod
    def from_names(cls, names: Dict[int, str]) -> "ClassMap":
        return cls(tuple(ClassInfo(id=k, name=v) for k, v in sorted(names.items())))


@dataclass(frozen=True)
class SegmentationLabel:
    """Per-pixel dataset class ids plus the taxonomy they refer to."""
    class_id: np.ndarray
    class_map: ClassMap

    def __post_init__(self) -> None:
        if self.class_id.ndim != 2:
            raise DataError(f"Segmentation label must be 2-D, got shape {self.class_id.shape}")

    @property
    def height(self) -> int:
        return int(self.class_id.shape[0])

    @property
    def width(self) -> int:
        return int(self.class_id.shape[1])


@dataclass(frozen=True)
class BackgroundClassSet:
    """Class names (or supercategories) treated as background."""
    names: FrozenSet[str] = field(default_factory=lambda: frozenset(BACKGROUND_CLASSES))

    def __post_init__(self) -> None:
        if not self.names:
            raise ConfigError("Background class set must not be empty")

    def resolve(self, class_map: ClassMap) -> List[int]:
        ids: List[int] = []
        for name in sorted(self.names):
            matched = class_map.ids_matching(name)
            if not matched:
                raise ConfigError(f"Background class '{name}' matches no class in the class map")
            ids.extend(matched)
        return sorted(set(ids))


def detect_class_edges(seg: SegmentationLabel, two_sided: bool = True) -> np.ndarray:
    """Mark pixels whose 4-neighbour (within bounds) carries a different class id.

    With ``two_sided`` both pixels of a class change are marked; otherwise only
    the pixel below / right of the change.
    """
    ids = seg.class_id
    edges = np.zeros(ids.shape, dtype=bool)

    vertical = ids[1:, :] != ids[:-1, :]
    horizontal = ids[:, 1:] != ids[:, :-1]

    edges[1:, :] |= vertical
    edges[:, 1:] |= horizontal
    if two_sided:
        edges[:-1, :] |= vertical
        edges[:, :-1] |= horizontal
    return edges.astype(np.uint8)


def disk_structure(diameter: float) -> np.ndarray:
    """Boolean footprint of offsets within Euclidean distance diameter / 2."""
    radius = diameter / 2.0
    reach = int(np.floor(radius))
    dy, dx = np.mgrid[-reach:reach + 1, -reach:reach + 1]
    return (dy * dy + dx * dx) <= radius * radius


def dilate_disk(mask: np.ndarray, diameter: float) -> np.ndarray:
    """Binary dilation with a Euclidean disk of the given diameter."""
    if diameter < 0:
        raise ConfigError(f"Disk diameter must be non-negative, got {diameter}")
    binary = np.asarray(mask).astype(bool)
    if diameter == 0 or not binary.any():
        return binary.astype(np.uint8)
    dilated = ndimage.binary_dilation(binary, structure=disk_structure(diameter))
    return dilated.astype(np.uint8)


def masks_from_obb(obb: OBBLabel, d1: float = 0.0) -> MaskSet:
    """One-hot float32 masks from an OBB label."""
    region = obb.region
    return MaskSet(
        object=(region == Region.OBJECT).astype(np.float32),
        background=(region == Region.BACKGROUND).astype(np.float32),
        boundary=(region == Region.BOUNDARY).astype(np.float32),
        d1=d1,
    )


def region_fractions(obb: OBBLabel) -> Dict[str, float]:
    total = max(obb.region.size, 1)
    return {
        region.name.lower(): float(np.count_nonzero(obb.region == region)) / total
        for region in Region
    }


def save_obb(obb: OBBLabel, path: str) -> None:
    """Write an OBB label as single-channel 8-bit PNG (0 object, 1 background, 2 boundary)."""
    write_png_raw(path, obb.region.astype(np.uint8))


def load_obb(path: str) -> OBBLabel:
    raw = read_png_raw(path)
    if raw.ndim != 2 or raw.dtype != np.uint8:
        raise DataError(f"OBB label must be a single-channel 8-bit PNG: {path}")
    unknown = np.setdiff1d(np.unique(raw), [r.value for r in Region])
    if unknown.size:
        raise DataError(f"OBB label holds unknown value(s) {unknown.tolist()}: {path}")
    return OBBLabel(raw.copy())


def load_class_map(path: str) -> ClassMap:
    if not os.path.isfile(path):
        raise DataError(f"Class map not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return ClassMap.from_json(json.load(f))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"Invalid class map: {path}: {e}") from e


def save_class_map(class_map: ClassMap, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(class_map.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_segmentation(path: str, class_map: ClassMap) -> SegmentationLabel:
    """Load a class-id PNG, or a colour-coded PNG decoded through the map's colours."""
    raw = read_png_raw(path)
    if raw.ndim == 2:
        return SegmentationLabel(raw.astype(np.int64), class_map)

    if raw.ndim == 3 and raw.shape[2] == 3:
        palette = {info.color: info.id for info in class_map.classes if info.color is not None}
        if not palette:
            raise DataError(f"Colour segmentation needs 'color' entries in the class map: {path}")
        rgb = raw[:, :, ::-1].astype(np.int64)
        packed = (rgb[:, :, 0] << 16) | (rgb[:, :, 1] << 8) | rgb[:, :, 2]
        ids = np.full(packed.shape, -1, dtype=np.int64)
        for (r, g, b), class_id in palette.items():
            ids[packed == ((r << 16) | (g << 8) | b)] = class_id
        return SegmentationLabel(ids, class_map)

    raise DataError(f"Unsupported segmentation layout {raw.shape}: {path}")


def save_segmentation(seg: SegmentationLabel, path: str) -> None:
    if seg.class_id.size and (seg.class_id.min() < 0 or seg.class_id.max() > 255):
        raise DataError(f"Class ids outside 0..255 cannot be stored as 8-bit PNG: {path}")
    write_png_raw(path, seg.class_id.astype(np.uint8))


class OBBLabeler:
    """Builds OBB labels with a fixed background set and disk diameter."""

    def __init__(
        self,
        background: Optional[BackgroundClassSet] = None,
        d1: float = D1,
        two_sided: bool = True,
    ):
        if d1 < 0:
            raise ConfigError(f"d1 must be non-negative, got {d1}")
        self.background = background or BackgroundClassSet()
        self.d1 = d1
        self.two_sided = two_sided

    def build_obb_label(self, seg: SegmentationLabel) -> OBBLabel:
        """Boundary strip = dilated class edges; elsewhere background or object."""
        bg_ids = self.background.resolve(seg.class_map)
        boundary = dilate_disk(detect_class_edges(seg, self.two_sided), self.d1).astype(bool)

        region = np.full(seg.class_id.shape, Region.OBJECT, dtype=np.uint8)
        region[np.isin(seg.class_id, bg_ids)] = Region.BACKGROUND
        region[boundary] = Region.BOUNDARY
        return OBBLabel(region)

    def label_directory(self, seg_dir: str, out_dir: str, class_map_path: Optional[str] = None) -> List[str]:
        """Convert every segmentation PNG in seg_dir into an OBB PNG in out_dir."""
        class_map = load_class_map(class_map_path or os.path.join(seg_dir, CLASS_MAP_NAME))
        paths = sorted(glob.glob(os.path.join(seg_dir, "*.png")))
        ensure_dir(out_dir)

        written = []
        for seg_path in paths:
            obb = self.build_obb_label(load_segmentation(seg_path, class_map))
            out_path = os.path.join(out_dir, os.path.basename(seg_path))
            save_obb(obb, out_path)
            fractions = region_fractions(obb)
            logger.debug(
                f"{os.path.basename(seg_path)}: object={fractions['object']:.3f} "
                f"background={fractions['background']:.3f} boundary={fractions['boundary']:.3f}"
            )
            written.append(out_path)

        logger.info(f"Wrote {len(written)} OBB labels to {out_dir} (d1={self.d1})")
        return written


def build_obb_label(
    seg: SegmentationLabel,
    background: Optional[BackgroundClassSet] = None,
    d1: float = D1,
) -> OBBLabel:
    return OBBLabeler(background, d1).build_obb_label(seg)


# Global service instance
obb_labeler = OBBLabeler()
