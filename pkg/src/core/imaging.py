"""Image IO, MATLAB-compatible bicubic resampling and training patch sampling.

Images are numpy float32 arrays of shape (H, W, 3) in RGB order with values
in [0, 1]. Networks consume (N, 3, H, W) torch tensors; see ``to_tensor``.
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence, Union

import cv2
import numpy as np
import torch

from .config import BICUBIC_A, PATCH_SIZE, SCALE
from .errors import ConfigError, DataError
from .regions import OBBLabel

logger = logging.getLogger("tpsr.imaging")

LUMA_COEFFS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

SeedLike = Union[int, Sequence[int], np.random.Generator]


@dataclass(frozen=True)
class ResizeSpec:
    """Bicubic resampling request; ``scale`` is output side / input side."""
    scale: float
    antialias: bool = True
    a: float = BICUBIC_A

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ConfigError(f"Resize scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class PatchPair:
    """Aligned HR crop, its bicubic LR and the matching OBB crop."""
    hr: np.ndarray
    lr: np.ndarray
    obb: OBBLabel
    top: int
    left: int


def read_png_raw(path: str) -> np.ndarray:
    """Decode a PNG without any conversion (uint8/uint16, BGR channel order)."""
    if not os.path.isfile(path):
        raise DataError(f"File not found: {path}")
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"Could not decode image data: {path}")
    return raw


def write_png_raw(path: str, array: np.ndarray) -> None:
    """Encode an array (already in BGR order if it has 3 channels) as PNG."""
    try:
        ok = cv2.imwrite(path, np.ascontiguousarray(array))
    except cv2.error as e:
        raise DataError(f"Could not write image: {path}: {e}") from e
    if not ok:
        raise DataError(f"Could not write image: {path}")


def load_image(path: str) -> np.ndarray:
    """Load an 8/16-bit RGB or grayscale PNG as float32 RGB in [0, 1]."""
    raw = read_png_raw(path)

    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise DataError(f"Unsupported bit depth {raw.dtype}: {path}")

    if raw.ndim == 2:
        rgb = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.ndim == 3 and raw.shape[2] == 3:
        rgb = raw[:, :, ::-1]
    else:
        raise DataError(f"Unsupported channel layout {raw.shape}: {path}")

    return np.ascontiguousarray(rgb.astype(np.float32) / np.float32(peak))


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp and round half away from zero onto the 8-bit grid, as uint8."""
    clamped = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path: str) -> None:
    """Write an image as 8-bit RGB PNG (values clamped to [0, 1] first)."""
    check_image(img)
    write_png_raw(path, quantize(img)[:, :, ::-1])


def check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"Expected an H x W x 3 image, got shape {img.shape}")


def _cubic(x: np.ndarray, a: float) -> np.ndarray:
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = ((a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0) * (ax <= 1.0)
    far = (a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a) * ((ax > 1.0) & (ax <= 2.0))
    return near + far


def resize_weights(in_length: int, out_length: int, spec: ResizeSpec) -> np.ndarray:
    """Dense (out_length, in_length) resampling matrix for one axis.

    Follows MATLAB imresize: pixel-centre mapping, kernel widened by 1/scale
    when antialiasing a downscale, symmetric (edge-repeating) extension and
    per-output-pixel weight normalisation.
    """
    scale = spec.scale
    kernel_width = 4.0
    if spec.antialias and scale < 1:
        kernel_width /= scale

        def kernel(x: np.ndarray) -> np.ndarray:
            return scale * _cubic(scale * x, spec.a)
    else:
        def kernel(x: np.ndarray) -> np.ndarray:
            return _cubic(x, spec.a)

    x = np.arange(1, out_length + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - kernel_width / 2.0)
    taps = int(math.ceil(kernel_width)) + 2
    indices = left[:, None] + np.arange(taps, dtype=np.float64)[None, :]

    weights = kernel(u[:, None] - indices)
    weights /= weights.sum(axis=1, keepdims=True)

    mirror = np.concatenate([np.arange(in_length), np.arange(in_length)[::-1]])
    source = mirror[np.mod(indices.astype(np.int64) - 1, 2 * in_length)]

    matrix = np.zeros((out_length, in_length), dtype=np.float64)
    rows = np.repeat(np.arange(out_length), taps)
    np.add.at(matrix, (rows, source.ravel()), weights.ravel())
    return matrix


def output_length(in_length: int, scale: float) -> int:
    return int(math.ceil(round(in_length * scale, 9)))


def resize_bicubic(img: np.ndarray, spec: ResizeSpec) -> np.ndarray:
    """Separable bicubic resampling of an (H, W) or (H, W, C) raster."""
    h, w = img.shape[:2]
    out_h, out_w = output_length(h, spec.scale), output_length(w, spec.scale)
    if out_h < 1 or out_w < 1:
        raise DataError(f"Degenerate output size {out_h}x{out_w} for input {h}x{w} at scale {spec.scale}")

    data = np.asarray(img, dtype=np.float64)
    rows = resize_weights(h, out_h, spec)
    cols = resize_weights(w, out_w, spec)
    out = np.tensordot(rows, data, axes=(1, 0))
    out = np.moveaxis(np.tensordot(cols, out, axes=(1, 1)), 0, 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def degrade(hr: np.ndarray, scale: int = SCALE) -> np.ndarray:
    """x1/scale antialiased bicubic degradation (the LR synthesis protocol)."""
    return resize_bicubic(hr, ResizeSpec(1.0 / scale, antialias=True))


def mod_crop(img: np.ndarray, scale: int = SCALE) -> np.ndarray:
    """Crop bottom/right so that height and width are multiples of scale."""
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def rgb_to_luma(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma in [0, 1]."""
    check_image(img)
    return (np.asarray(img, dtype=np.float64) @ LUMA_COEFFS).astype(np.float32)


def sample_patch_pair(
    hr_image: np.ndarray,
    obb: OBBLabel,
    seed: SeedLike,
    patch_size: int = PATCH_SIZE,
    scale: int = SCALE,
) -> PatchPair:
    """Random grid-aligned HR crop with its LR counterpart and OBB crop."""
    check_image(hr_image)
    h, w = hr_image.shape[:2]
    if (obb.height, obb.width) != (h, w):
        raise DataError(f"OBB label {obb.height}x{obb.width} not aligned with image {h}x{w}")
    if h < patch_size or w < patch_size:
        raise DataError(f"Image {h}x{w} smaller than patch size {patch_size}")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top = scale * int(rng.integers((h - patch_size) // scale + 1))
    left = scale * int(rng.integers((w - patch_size) // scale + 1))

    hr = np.ascontiguousarray(hr_image[top:top + patch_size, left:left + patch_size])
    lr = resize_bicubic(hr, ResizeSpec(1.0 / scale, antialias=True))
    return PatchPair(hr=hr, lr=lr, obb=obb.crop(top, left, patch_size), top=top, left=left)


def to_tensor(img: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W, 3) image -> (1, 3, H, W) tensor."""
    check_image(img)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype).unsqueeze(0)


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor -> (H, W, 3) float32 image clamped to [0, 1]."""
    if tensor.dim() == 4:
        if tensor.size(0) != 1:
            raise DataError(f"Expected a single image, got batch of {tensor.size(0)}")
        tensor = tensor[0]
    arr = tensor.detach().cpu().clamp(0.0, 1.0).numpy().transpose(1, 2, 0)
    return np.ascontiguousarray(arr, dtype=np.float32)
