"""Configuration and constants for the targeted perceptual loss SR toolkit."""

import json
import logging
import os
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from .errors import ConfigError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger("tpsr.config")

APP_NAME = "targeted-perceptual-sr"
VERSION = "0.1.0"

# Degradation / patches
SCALE = 4
PATCH_SIZE = 96
BICUBIC_A = -0.5

# OBB labels
D1 = 2.0
BACKGROUND_CLASSES = ("sky", "plant", "ground", "water")
UNLABELED = "unlabeled"

# Loss weights (w_mse / w_adv follow the SRGAN content 1.0 / adversarial 1e-3 convention)
ALPHA = 2e-6
BETA = 1.5e-6
GAMMA = 0.0
W_MSE = 1.0
W_ADV = 1e-3
EPS_PROB = 1e-7

# Schedule
LR0 = 1e-3
PRETRAIN_EPOCHS = 25
MAIN_EPOCHS = 55
DECAY_EVERY = 20
DECAY_FACTOR = 0.1
BATCH_SIZE = 16
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DEFAULT_SEED = 0

# Evaluation
BORDER_SHAVE = SCALE
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BENCH_WARMUP = 5
BENCH_REPEATS = 20
XGA_LR_SIZE = (192, 256)  # (height, width) of the LR input for a 1024x768 output

# ImageNet statistics for VGG inputs
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# File layout
CHECKPOINT_TEMPLATE = "epoch_{epoch:04d}.ckpt"
TRAIN_LOG_NAME = "train_log.jsonl"
CLASS_MAP_NAME = "classes.json"
MANIFEST_NAME = "manifest.jsonl"

# Environment-provided defaults
CONFIG_ENV = "TPSR_CONFIG"
VGG_WEIGHTS_ENV = "TPSR_VGG_WEIGHTS"
LOG_LEVEL_ENV = "TPSR_LOG_LEVEL"


def get_default_config_path() -> Optional[str]:
    """Config file named by the environment, if any."""
    path = os.environ.get(CONFIG_ENV, "").strip()
    return path or None


def get_default_vgg_weights() -> Optional[str]:
    """Pretrained VGG-16 archive named by the environment, if any."""
    path = os.environ.get(VGG_WEIGHTS_ENV, "").strip()
    return path or None


def get_default_log_level() -> str:
    return os.environ.get(LOG_LEVEL_ENV, "INFO").upper()


def load_config_file(path: str) -> Dict[str, Any]:
    """Load a JSON configuration file.

    The file holds one JSON object. Top-level scalar keys apply to every
    subcommand; object-valued keys named after a subcommand apply to it only.
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file is not valid JSON: {path}: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"Config file must contain a JSON object: {path}")

    logger.info(f"Loaded config file {path} ({len(data)} keys)")
    return data


def section_for(config: Dict[str, Any], command: Optional[str]) -> Dict[str, Any]:
    """Flatten a config object for one subcommand (section keys override globals)."""
    merged = {
        key.replace("-", "_"): value
        for key, value in config.items()
        if not isinstance(value, dict)
    }
    if command and isinstance(config.get(command), dict):
        merged.update({key.replace("-", "_"): value for key, value in config[command].items()})
    return merged
