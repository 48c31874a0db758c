"""Data models and TypedDict definitions for reports and log records."""

from typing import List, Optional

from typing_extensions import TypedDict


class LossReport(TypedDict):
    """Per-batch generator objective components.

    total = w_mse*mse + w_adv*adv_g + alpha*perc_boundary + beta*perc_background
    + gamma*perc_object, evaluated in that order.
    """
    total: float
    mse: float
    adv_g: float
    perc_boundary: float
    perc_background: float
    perc_object: float


class TrainLogRecord(TypedDict, total=False):
    """One JSON line of the training log."""
    step: int
    epoch: int
    phase: str
    total: float
    mse: float
    adv_g: float
    adv_d: float
    perc_boundary: float
    perc_background: float
    perc_object: float
    lr: float


class ManifestEntry(TypedDict):
    """Dataset manifest line: HR image path and its OBB label path."""
    hr: str
    obb: str


class RegionScores(TypedDict):
    """Per-region PSNR; None marks a region absent after the border shave."""
    object: Optional[float]
    background: Optional[float]
    boundary: Optional[float]


class EvalRow(TypedDict, total=False):
    """One row of the `eval` CSV."""
    image: str
    psnr: float
    ssim: float
    psnr_object: Optional[float]
    psnr_background: Optional[float]
    psnr_boundary: Optional[float]


class BenchReport(TypedDict, total=False):
    """Throughput benchmark result."""
    fps_median: float
    fps_mean: float
    latency_ms_p50: float
    latency_ms_mean: float
    latency_ms_min: float
    latency_ms_max: float
    input_size: List[int]
    warmup: int
    repeats: int
    device: str
    timestamp: str


class TrainResult(TypedDict, total=False):
    """Summary returned by a training run."""
    success: bool
    checkpoint: str
    epochs_completed: int
    global_step: int
    elapsed_sec: float
