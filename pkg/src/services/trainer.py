"""Two-phase training: MSE pretraining, then alternating discriminator/generator updates."""

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, default_collate

from ..core.config import (
    ADAM_BETAS,
    ADAM_EPS,
    BATCH_SIZE,
    CHECKPOINT_TEMPLATE,
    DECAY_EVERY,
    DECAY_FACTOR,
    DEFAULT_SEED,
    LR0,
    MAIN_EPOCHS,
    PATCH_SIZE,
    PRETRAIN_EPOCHS,
    SCALE,
    TRAIN_LOG_NAME,
)
from ..core.errors import ConfigError, DataError, TrainingError
from ..core.imaging import load_image, sample_patch_pair, save_image, to_image, to_tensor
from ..core.models import ManifestEntry, TrainLogRecord, TrainResult
from ..core.utils import append_jsonl, calculate_elapsed_time, ensure_dir, read_jsonl
from ..networks.checkpoint import Checkpoint, apply_state, load_checkpoint, save_checkpoint
from ..networks.features import FeatureExtractor
from ..networks.objectives import LossWeights, adversarial_d, pixel_mse, total_generator_loss
from ..networks.srgan import DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator
from .obb_labeler import load_obb, masks_from_obb

logger = logging.getLogger("tpsr.trainer")


class Phase(str, Enum):
    PRETRAIN = "pretrain"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class TrainSchedule:
    """Epoch plan and Adam settings; the lr decay counter runs over both phases."""
    pretrain_epochs: int = PRETRAIN_EPOCHS
    main_epochs: int = MAIN_EPOCHS
    lr0: float = LR0
    decay_every: int = DECAY_EVERY
    decay_factor: float = DECAY_FACTOR
    batch_size: int = BATCH_SIZE
    betas: Tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    seed: int = DEFAULT_SEED
    patch_size: int = PATCH_SIZE
    scale: int = SCALE

    def __post_init__(self) -> None:
        if self.pretrain_epochs < 0 or self.main_epochs < 0:
            raise ConfigError("Epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be non-negative, got {self.lr0}")

    @property
    def total_epochs(self) -> int:
        return self.pretrain_epochs + self.main_epochs

    def phase_of(self, epoch: int) -> Phase:
        return Phase.PRETRAIN if epoch < self.pretrain_epochs else Phase.ADVERSARIAL

    def as_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data


def lr_at(schedule: TrainSchedule, epoch: int) -> float:
    """lr0 * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    return schedule.lr0 * schedule.decay_factor ** (epoch // schedule.decay_every)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = LR0
    phase: Phase = Phase.PRETRAIN
    running: Dict[str, float] = field(default_factory=dict)
    batches: int = 0


def load_manifest(path: str) -> List[ManifestEntry]:
    """Read a JSON-lines manifest; relative paths resolve against the manifest's directory."""
    if not os.path.isfile(path):
        raise DataError(f"Manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    entries: List[ManifestEntry] = []
    for line_no, record in enumerate(read_jsonl(path), start=1):
        if not record.get("hr"):
            raise DataError(f"Manifest {path} line {line_no} has no 'hr' path")
        if not record.get("obb"):
            raise DataError(f"Manifest {path} line {line_no} is missing its OBB label ('obb')")
        entry: ManifestEntry = {
            "hr": os.path.join(base, record["hr"]),
            "obb": os.path.join(base, record["obb"]),
        }
        for key in ("hr", "obb"):
            if not os.path.isfile(entry[key]):  # type: ignore[literal-required]
                raise DataError(f"Manifest {path} line {line_no}: file not found: {entry[key]}")  # type: ignore[literal-required]
        entries.append(entry)
    return entries


class PatchPairDataset(Dataset):
    """One seeded random patch per manifest image per epoch."""

    def __init__(self, entries: Sequence[ManifestEntry], seed: int, patch_size: int = PATCH_SIZE, scale: int = SCALE):
        self.entries = list(entries)
        self.seed = seed
        self.patch_size = patch_size
        self.scale = scale
        self.epoch = 0
        self._cache: Dict[int, Tuple[np.ndarray, Any]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _load(self, index: int):
        if index not in self._cache:
            entry = self.entries[index]
            hr = load_image(entry["hr"])
            obb = load_obb(entry["obb"])
            if (obb.height, obb.width) != hr.shape[:2]:
                raise DataError(f"OBB label {entry['obb']} is not aligned with {entry['hr']}")
            self._cache[index] = (hr, obb)
        return self._cache[index]

    def __getitem__(self, index: int) -> Dict[str, Any]:
        hr, obb = self._load(index)
        pair = sample_patch_pair(hr, obb, seed=(self.seed, self.epoch, index), patch_size=self.patch_size, scale=self.scale)
        masks = masks_from_obb(pair.obb)
        return {
            "index": index,
            "lr": torch.from_numpy(pair.lr.transpose(2, 0, 1).copy()),
            "hr": torch.from_numpy(pair.hr.transpose(2, 0, 1).copy()),
            "object": torch.from_numpy(masks.object[None]),
            "background": torch.from_numpy(masks.background[None]),
            "boundary": torch.from_numpy(masks.boundary[None]),
        }

    def epoch_order(self, epoch: int) -> List[int]:
        return np.random.default_rng((self.seed, epoch)).permutation(len(self)).tolist()

    def loader(self, epoch: int, batch_size: int) -> DataLoader:
        self.set_epoch(epoch)
        return DataLoader(self, batch_size=batch_size, sampler=self.epoch_order(epoch), collate_fn=default_collate, num_workers=0)


class Trainer:
    """Owns the generator, discriminator, their optimizers and the training log."""

    def __init__(
        self,
        schedule: TrainSchedule,
        weights: LossWeights,
        fx: FeatureExtractor,
        generator_cfg: GeneratorConfig = GeneratorConfig(),
        discriminator_cfg: DiscriminatorConfig = DiscriminatorConfig(),
        log_path: Optional[str] = None,
    ):
        if discriminator_cfg.input_size != schedule.patch_size:
            raise ConfigError(
                f"Discriminator input size {discriminator_cfg.input_size} != patch size {schedule.patch_size}"
            )
        self.schedule = schedule
        self.weights = weights
        self.fx = fx
        self.generator_cfg = generator_cfg
        self.discriminator_cfg = discriminator_cfg
        self.log_path = log_path

        self.generator = build_generator(generator_cfg, seed=schedule.seed)
        self.discriminator = build_discriminator(discriminator_cfg, seed=schedule.seed + 1)
        self.optim_g = torch.optim.Adam(self.generator.parameters(), lr=schedule.lr0, betas=schedule.betas, eps=schedule.eps)
        self.optim_d = torch.optim.Adam(self.discriminator.parameters(), lr=schedule.lr0, betas=schedule.betas, eps=schedule.eps)
        self.state = TrainState(lr=schedule.lr0)

    # -- schedule -------------------------------------------------------------

    def set_lr(self, lr: float) -> None:
        for optimizer in (self.optim_g, self.optim_d):
            for group in optimizer.param_groups:
                group["lr"] = lr
        self.state.lr = lr

    def begin_epoch(self, epoch: int) -> None:
        self.state.epoch = epoch
        self.state.phase = self.schedule.phase_of(epoch)
        self.state.running = {}
        self.state.batches = 0
        self.set_lr(lr_at(self.schedule, epoch))

    # -- steps ----------------------------------------------------------------

    def _check_finite(self, value: torch.Tensor, what: str, batch: Dict[str, Any]) -> None:
        if not torch.isfinite(value).all():
            ids = batch["index"].tolist() if isinstance(batch["index"], torch.Tensor) else batch["index"]
            raise TrainingError(
                f"Non-finite {what} at step {self.state.step} (epoch {self.state.epoch}, "
                f"batch ids {ids}, lr {self.state.lr})"
            )

    def _record(self, values: Dict[str, float]) -> TrainLogRecord:
        self.state.step += 1
        record: TrainLogRecord = {
            "step": self.state.step,
            "epoch": self.state.epoch,
            "phase": self.state.phase.value,
            "total": values.get("total", 0.0),
            "mse": values.get("mse", 0.0),
            "adv_g": values.get("adv_g", 0.0),
            "adv_d": values.get("adv_d", 0.0),
            "perc_boundary": values.get("perc_boundary", 0.0),
            "perc_background": values.get("perc_background", 0.0),
            "perc_object": values.get("perc_object", 0.0),
            "lr": self.state.lr,
        }
        for key in ("total", "mse", "adv_g", "adv_d", "perc_boundary", "perc_background"):
            self.state.running[key] = self.state.running.get(key, 0.0) + float(record[key])  # type: ignore[literal-required]
        self.state.batches += 1
        if self.log_path:
            append_jsonl(self.log_path, dict(record))
        return record

    def pretrain_step(self, batch: Dict[str, Any]) -> TrainLogRecord:
        """One Adam step of the generator on pixel MSE only."""
        if self.state.phase is not Phase.PRETRAIN:
            raise TrainingError(f"pretrain_step called in phase {self.state.phase.value}")
        self.generator.train()
        sr = self.generator(batch["lr"])
        loss = pixel_mse(sr, batch["hr"])
        self._check_finite(loss, "pixel MSE", batch)

        self.optim_g.zero_grad(set_to_none=True)
        loss.backward()
        self.optim_g.step()

        value = float(loss.detach())
        return self._record({"total": value, "mse": value})

    def adversarial_step(self, batch: Dict[str, Any], probe: bool = False) -> TrainLogRecord:
        """Discriminator step on adversarial_d, then generator step on the full objective.

        ``probe`` substitutes the HR batch for the generator output (diagnostics only;
        the generator is not updated).
        """
        if self.state.phase is not Phase.ADVERSARIAL:
            raise TrainingError(f"adversarial_step called in phase {self.state.phase.value}")
        hr = batch["hr"]
        masks = {name: batch[name] for name in ("object", "background", "boundary")}

        self.generator.train()
        self.discriminator.train()
        if probe:
            sr = hr.clone().requires_grad_(True)
        else:
            sr = self.generator(batch["lr"])
        if sr.shape != hr.shape:
            raise DataError(f"Generator output {tuple(sr.shape)} not aligned with HR patch {tuple(hr.shape)}")

        self.discriminator.requires_grad_(True)
        loss_d = adversarial_d(self.discriminator(hr), self.discriminator(sr.detach()))
        self._check_finite(loss_d, "discriminator loss", batch)
        self.optim_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.optim_d.step()

        self.discriminator.requires_grad_(False)
        total, report = total_generator_loss(self.fx, sr, hr, masks, self.discriminator(sr), self.weights)
        self.discriminator.requires_grad_(True)
        self._check_finite(total, "generator loss", batch)
        self.optim_g.zero_grad(set_to_none=True)
        total.backward()
        if not probe:
            self.optim_g.step()

        values: Dict[str, float] = dict(report)  # type: ignore[arg-type]
        values["adv_d"] = float(loss_d.detach())
        return self._record(values)

    def train_epoch(self, dataset: PatchPairDataset, epoch: int) -> Dict[str, float]:
        self.begin_epoch(epoch)
        step_fn = self.pretrain_step if self.state.phase is Phase.PRETRAIN else self.adversarial_step
        for batch in dataset.loader(epoch, self.schedule.batch_size):
            step_fn(batch)
        self.fx.assert_frozen()

        means = {key: total / max(self.state.batches, 1) for key, total in self.state.running.items()}
        logger.info(
            f"Epoch {epoch + 1}/{self.schedule.total_epochs} [{self.state.phase.value}] "
            f"lr={self.state.lr:.2e} steps={self.state.batches} "
            + " ".join(f"{key}={value:.5g}" for key, value in sorted(means.items()))
        )
        return means

    # -- persistence ----------------------------------------------------------

    def config_snapshot(self) -> Dict[str, Any]:
        return {
            "schedule": self.schedule.as_dict(),
            "weights": self.weights.as_dict(),
            "generator": self.generator_cfg.as_dict(),
            "discriminator": self.discriminator_cfg.as_dict(),
            "extractor": {"mode": self.fx.mode, "seed": self.fx.seed},
        }

    def to_checkpoint(self, epochs_completed: int) -> Checkpoint:
        return Checkpoint(
            generator={k: v.clone() for k, v in self.generator.state_dict().items()},
            discriminator={k: v.clone() for k, v in self.discriminator.state_dict().items()},
            optim_g=self.optim_g.state_dict(),
            optim_d=self.optim_d.state_dict(),
            epoch=epochs_completed,
            step=self.state.step,
            config=self.config_snapshot(),
            rng={"torch": torch.get_rng_state()},
        )

    def restore(self, ckpt: Checkpoint) -> None:
        self.check_compatible(ckpt)
        apply_state(self.generator, ckpt.generator, "generator")
        apply_state(self.discriminator, ckpt.discriminator, "discriminator")
        if ckpt.optim_g:
            self.optim_g.load_state_dict(ckpt.optim_g)
        if ckpt.optim_d:
            self.optim_d.load_state_dict(ckpt.optim_d)
        if "torch" in ckpt.rng:
            torch.set_rng_state(ckpt.rng["torch"])
        self.state.epoch = ckpt.epoch
        self.state.step = ckpt.step

    def check_compatible(self, ckpt: Checkpoint) -> None:
        saved = ckpt.config
        current = self.config_snapshot()
        for key in ("generator", "discriminator", "weights", "extractor"):
            if saved.get(key) != current[key]:
                raise ConfigError(f"Resume mismatch: {key} config {saved.get(key)} != {current[key]}")
        for key in ("seed", "batch_size", "patch_size", "scale"):
            if saved.get("schedule", {}).get(key) != current["schedule"][key]:
                raise ConfigError(
                    f"Resume mismatch: schedule.{key} {saved.get('schedule', {}).get(key)} != {current['schedule'][key]}"
                )


def run(
    schedule: TrainSchedule,
    manifest_path: str,
    out_dir: str,
    weights: LossWeights,
    fx: FeatureExtractor,
    generator_cfg: GeneratorConfig = GeneratorConfig(),
    discriminator_cfg: DiscriminatorConfig = DiscriminatorConfig(),
    resume: Optional[str] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Execute both phases, checkpointing after every epoch.

    ``stop_after`` ends the run once that many epochs (counted from 0) are
    complete, leaving the checkpoint for a later resume.
    """
    start_time = time.time()
    entries = load_manifest(manifest_path)
    if not entries:
        raise DataError(f"Manifest {manifest_path} lists no images")
    ensure_dir(out_dir)

    trainer = Trainer(
        schedule, weights, fx, generator_cfg, discriminator_cfg, log_path=os.path.join(out_dir, TRAIN_LOG_NAME)
    )
    first_epoch = 0
    if resume:
        ckpt = load_checkpoint(resume)
        trainer.restore(ckpt)
        first_epoch = ckpt.epoch
        logger.info(f"Resumed from {resume} at epoch {first_epoch} (step {ckpt.step})")

    dataset = PatchPairDataset(entries, seed=schedule.seed, patch_size=schedule.patch_size, scale=schedule.scale)
    steps_per_epoch = math.ceil(len(dataset) / schedule.batch_size)
    logger.info(
        f"Training on {len(dataset)} images, {steps_per_epoch} steps/epoch, "
        f"epochs {first_epoch}..{schedule.total_epochs - 1} "
        f"(pretrain < {schedule.pretrain_epochs})"
    )

    last_epoch = schedule.total_epochs if stop_after is None else min(stop_after, schedule.total_epochs)
    checkpoint_path = resume or ""
    for epoch in range(first_epoch, last_epoch):
        trainer.train_epoch(dataset, epoch)
        checkpoint_path = os.path.join(out_dir, CHECKPOINT_TEMPLATE.format(epoch=epoch + 1))
        save_checkpoint(trainer.to_checkpoint(epoch + 1), checkpoint_path)

    if not checkpoint_path:
        checkpoint_path = os.path.join(out_dir, CHECKPOINT_TEMPLATE.format(epoch=first_epoch))
        save_checkpoint(trainer.to_checkpoint(first_epoch), checkpoint_path)

    return {
        "success": True,
        "checkpoint": checkpoint_path,
        "epochs_completed": max(last_epoch, first_epoch),
        "global_step": trainer.state.step,
        "elapsed_sec": calculate_elapsed_time(start_time),
    }


def load_generator(checkpoint_path: str) -> Tuple[torch.nn.Module, Checkpoint]:
    """Rebuild the generator stored in a checkpoint, in inference mode."""
    ckpt = load_checkpoint(checkpoint_path)
    saved = ckpt.config.get("generator")
    if not saved:
        raise ConfigError(f"Checkpoint has no generator config: {checkpoint_path}")
    try:
        cfg = GeneratorConfig(**saved)
    except TypeError as e:
        raise ConfigError(f"Checkpoint generator config does not match this version: {e}") from e
    generator = build_generator(cfg)
    apply_state(generator, ckpt.generator, "generator")
    generator.eval()
    return generator, ckpt


def super_resolve(checkpoint_path: str, inputs: Sequence[str], out_dir: str) -> List[str]:
    """Write a x scale SR PNG (same file name) for every LR input."""
    generator, _ = load_generator(checkpoint_path)
    ensure_dir(out_dir)
    written = []
    with torch.no_grad():
        for path in inputs:
            lr = load_image(path)
            sr = to_image(generator(to_tensor(lr)))
            out_path = os.path.join(out_dir, os.path.basename(path))
            save_image(sr, out_path)
            logger.info(f"{path}: {lr.shape[1]}x{lr.shape[0]} -> {sr.shape[1]}x{sr.shape[0]}")
            written.append(out_path)
    return written
