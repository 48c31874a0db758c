"""PSNR / SSIM metrics, OBB region scoring and inference throughput."""

import glob
import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import signal

from ..core.config import (
    BENCH_REPEATS,
    BENCH_WARMUP,
    BORDER_SHAVE,
    SCALE,
    SSIM_K1,
    SSIM_K2,
    SSIM_SIGMA,
    SSIM_WINDOW,
    XGA_LR_SIZE,
)
from ..core.errors import ConfigError, DataError
from ..core.imaging import ResizeSpec, check_image, degrade, load_image, quantize, resize_bicubic, rgb_to_luma
from ..core.models import BenchReport, EvalRow, RegionScores
from ..core.utils import now_ts
from ..core.regions import MaskSet
from .obb_labeler import load_obb, masks_from_obb
from .trainer import load_generator

logger = logging.getLogger("tpsr.evaluator")

# PSNR of identical images
PSNR_IDENTICAL = math.inf


@dataclass(frozen=True)
class MetricConvention:
    color: str = "rgb"
    border_shave: int = BORDER_SHAVE
    data_range: float = 1.0

    def __post_init__(self) -> None:
        if self.color not in ("rgb", "luma"):
            raise ConfigError(f"color must be 'rgb' or 'luma', got '{self.color}'")
        if self.border_shave < 0:
            raise ConfigError(f"border_shave must be non-negative, got {self.border_shave}")
        if not self.data_range > 0:
            raise ConfigError(f"data_range must be positive, got {self.data_range}")


def _prepare(img: np.ndarray, conv: MetricConvention) -> np.ndarray:
    """Shaved, colour-converted float64 image, always H x W x C."""
    check_image(img)
    h, w = img.shape[:2]
    s = conv.border_shave
    if 2 * s >= h or 2 * s >= w:
        raise DataError(f"Border shave {s} leaves nothing of a {h}x{w} image")
    data = rgb_to_luma(img)[:, :, None] if conv.color == "luma" else img
    return np.asarray(data[s:h - s, s:w - s], dtype=np.float64)


def _check_aligned(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"Image dimensions differ: {a.shape} vs {b.shape}")


def _psnr_from_mse(mse: float, data_range: float) -> float:
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(data_range * data_range / mse)


def psnr(a: np.ndarray, b: np.ndarray, conv: MetricConvention = MetricConvention()) -> float:
    _check_aligned(a, b)
    x, y = _prepare(a, conv), _prepare(b, conv)
    return _psnr_from_mse(float(np.mean((x - y) ** 2)), conv.data_range)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(z: np.ndarray) -> np.ndarray:
        return signal.convolve2d(z, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


def ssim(a: np.ndarray, b: np.ndarray, conv: MetricConvention = MetricConvention()) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    _check_aligned(a, b)
    x, y = _prepare(a, conv), _prepare(b, conv)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise DataError(f"Image {x.shape[0]}x{x.shape[1]} (after shave) smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = gaussian_window()
    return float(np.mean([_ssim_channel(x[:, :, c], y[:, :, c], window, conv.data_range) for c in range(x.shape[2])]))


def region_scores(
    sr: np.ndarray,
    hr: np.ndarray,
    masks: MaskSet,
    conv: MetricConvention = MetricConvention(),
) -> RegionScores:
    """PSNR over the pixels of each region; None for a region absent after the shave."""
    _check_aligned(sr, hr)
    if masks.shape != sr.shape[:2]:
        raise DataError(f"Masks {masks.shape} not aligned with image {sr.shape[:2]}")
    if not masks.is_partition():
        raise DataError("OBB masks do not partition the frame")

    x, y = _prepare(sr, conv), _prepare(hr, conv)
    s = conv.border_shave
    h, w = sr.shape[:2]
    sq = (x - y) ** 2

    scores = {}
    for name, mask in masks.as_dict().items():
        region = mask[s:h - s, s:w - s] > 0
        count = int(np.count_nonzero(region))
        if count == 0:
            scores[name] = None
            continue
        values = sq if count == region.size else sq[region]
        scores[name] = _psnr_from_mse(float(np.mean(values)), conv.data_range)
    return {"object": scores["object"], "background": scores["background"], "boundary": scores["boundary"]}


def bicubic_baseline(hr: np.ndarray, scale: int = SCALE, quantize_lr: bool = True) -> np.ndarray:
    """Degrade then upscale with MATLAB-style bicubic; LR optionally rounded to 8 bits as stored."""
    lr = degrade(hr, scale)
    if quantize_lr:
        lr = quantize(lr).astype(np.float32) / np.float32(255.0)
    return resize_bicubic(lr, ResizeSpec(float(scale), antialias=True))


def evaluate_pair(
    name: str,
    sr: np.ndarray,
    hr: np.ndarray,
    masks: Optional[MaskSet] = None,
    conv: MetricConvention = MetricConvention(),
) -> EvalRow:
    row: EvalRow = {"image": name, "psnr": psnr(sr, hr, conv), "ssim": ssim(sr, hr, conv)}
    if masks is not None:
        scores = region_scores(sr, hr, masks, conv)
        row["psnr_object"] = scores["object"]
        row["psnr_background"] = scores["background"]
        row["psnr_boundary"] = scores["boundary"]
    else:
        row["psnr_object"] = row["psnr_background"] = row["psnr_boundary"] = None
    return row


def evaluate_directory(
    sr_dir: str,
    hr_dir: str,
    obb_dir: Optional[str] = None,
    conv: MetricConvention = MetricConvention(),
    out_csv: Optional[str] = None,
) -> pd.DataFrame:
    """Score every SR PNG against the HR PNG of the same name (and its OBB label)."""
    sr_paths = sorted(glob.glob(os.path.join(sr_dir, "*.png")))
    if not sr_paths:
        raise DataError(f"No PNG images in {sr_dir}")

    rows: List[EvalRow] = []
    for sr_path in sr_paths:
        name = os.path.basename(sr_path)
        hr_path = os.path.join(hr_dir, name)
        if not os.path.isfile(hr_path):
            raise DataError(f"No HR image for {name} in {hr_dir}")
        masks = masks_from_obb(load_obb(os.path.join(obb_dir, name))) if obb_dir else None
        rows.append(evaluate_pair(name, load_image(sr_path), load_image(hr_path), masks, conv))

    df = pd.DataFrame(rows, columns=["image", "psnr", "ssim", "psnr_object", "psnr_background", "psnr_boundary"])
    means = df.drop(columns=["image"]).replace([np.inf], np.nan).mean(numeric_only=True)
    logger.info(
        f"Evaluated {len(df)} images ({conv.color}, shave {conv.border_shave}): "
        + " ".join(f"{col}={value:.4f}" for col, value in means.items() if not math.isnan(value))
    )
    if out_csv:
        df.to_csv(out_csv, index=False)
        logger.info(f"Wrote {out_csv}")
    return df


def benchmark_throughput(
    checkpoint_path: str,
    input_size: Tuple[int, int] = XGA_LR_SIZE,
    repeats: int = BENCH_REPEATS,
    warmup: int = BENCH_WARMUP,
) -> BenchReport:
    """Time ``repeats`` generator forward passes on a random LR input after ``warmup`` untimed ones."""
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    height, width = input_size
    if height < 1 or width < 1:
        raise ConfigError(f"Invalid input size {height}x{width}")

    generator, _ = load_generator(checkpoint_path)
    lr = torch.rand(1, 3, height, width, generator=torch.Generator().manual_seed(0))

    latencies: List[float] = []
    with torch.no_grad():
        for _ in range(warmup):
            generator(lr)
        for _ in range(repeats):
            start = time.perf_counter()
            generator(lr)
            latencies.append(time.perf_counter() - start)

    fps = [1.0 / max(t, 1e-12) for t in latencies]
    report: BenchReport = {
        "fps_median": statistics.median(fps),
        "fps_mean": statistics.fmean(fps),
        "latency_ms_p50": 1000.0 * statistics.median(latencies),
        "latency_ms_mean": 1000.0 * statistics.fmean(latencies),
        "latency_ms_min": 1000.0 * min(latencies),
        "latency_ms_max": 1000.0 * max(latencies),
        "input_size": [height, width],
        "warmup": warmup,
        "repeats": repeats,
        "device": "cpu",
        "timestamp": now_ts(),
    }
    logger.info(
        f"Throughput at LR {height}x{width}: median {report['fps_median']:.2f} fps, "
        f"p50 latency {report['latency_ms_p50']:.1f} ms over {repeats} runs"
    )
    return report


def write_bench_report(report: BenchReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")

