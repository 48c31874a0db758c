"""SRGAN-style x4 generator and 96x96 discriminator."""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import torch
import torch.nn as nn

from ..core.config import PATCH_SIZE, SCALE
from ..core.errors import ConfigError, DataError

logger = logging.getLogger("tpsr.networks")

# BatchNorm running averages keep 0.9 of the old value (torch momentum = 1 - 0.9)
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    n_residual_blocks: int = 16
    base_channels: int = 64
    scale: int = SCALE
    outer_kernel: int = 9
    residual_kernel: int = 3
    skip: str = "add"

    def __post_init__(self) -> None:
        if self.scale < 2 or self.scale & (self.scale - 1):
            raise ConfigError(f"Generator scale must be a power of two >= 2, got {self.scale}")
        if self.skip not in ("add", "concat"):
            raise ConfigError(f"skip must be 'add' or 'concat', got '{self.skip}'")
        if self.n_residual_blocks < 0:
            raise ConfigError("n_residual_blocks must be non-negative")

    @property
    def n_upsample_blocks(self) -> int:
        return int(math.log2(self.scale))

    def as_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    channels: Tuple[int, ...] = (64, 64, 128, 128, 256, 256, 512, 512)
    strides: Tuple[int, ...] = (1, 2, 1, 2, 1, 2, 1, 2)
    leaky_slope: float = LEAKY_SLOPE
    dense_width: int = 1024
    input_size: int = PATCH_SIZE

    def __post_init__(self) -> None:
        if len(self.channels) != len(self.strides):
            raise ConfigError("Discriminator channels and strides differ in length")
        downsample = math.prod(self.strides)
        if self.input_size % downsample:
            raise ConfigError(f"input_size {self.input_size} is not divisible by the total stride {downsample}")

    @property
    def feature_size(self) -> int:
        return self.input_size // math.prod(self.strides)

    def as_dict(self) -> Dict:
        data = asdict(self)
        data["channels"] = list(self.channels)
        data["strides"] = list(self.strides)
        return data


class ResidualBlock(nn.Module):
    """conv-BN-ReLU-conv-BN with a local identity skip."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel, padding=kernel // 2),
            nn.BatchNorm2d(channels, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel, padding=kernel // 2),
            nn.BatchNorm2d(channels, momentum=BN_MOMENTUM),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class UpsampleBlock(nn.Module):
    """conv to 4x channels, depth-to-space x2, ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels * 4, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.shuffle(self.conv(x)))


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.head = nn.Sequential(
            nn.Conv2d(3, c, cfg.outer_kernel, padding=cfg.outer_kernel // 2),
            nn.ReLU(inplace=True),
        )
        self.residuals = nn.Sequential(*[ResidualBlock(c, cfg.residual_kernel) for _ in range(cfg.n_residual_blocks)])
        self.trunk_tail = nn.Sequential(
            nn.Conv2d(c, c, cfg.residual_kernel, padding=cfg.residual_kernel // 2),
            nn.BatchNorm2d(c, momentum=BN_MOMENTUM),
        )
        up_in = c if cfg.skip == "add" else 2 * c
        blocks = [UpsampleBlock(up_in, c)]
        blocks += [UpsampleBlock(c, c) for _ in range(cfg.n_upsample_blocks - 1)]
        self.upsample = nn.Sequential(*blocks)
        self.tail = nn.Conv2d(c, 3, cfg.outer_kernel, padding=cfg.outer_kernel // 2)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        if lr.dim() != 4 or lr.size(1) != 3:
            raise DataError(f"Generator expects N x 3 x H x W input, got {tuple(lr.shape)}")
        first = self.head(lr)
        trunk = self.trunk_tail(self.residuals(first))
        if self.cfg.skip == "add":
            merged = trunk + first
        else:
            merged = torch.cat([trunk, first], dim=1)
        sr = self.tail(self.upsample(merged))
        if not self.training:
            sr = sr.clamp(0.0, 1.0)
        return sr


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        in_ch = 3
        for i, (out_ch, stride) in enumerate(zip(cfg.channels, cfg.strides)):
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(out_ch, momentum=BN_MOMENTUM))
            layers.append(nn.LeakyReLU(cfg.leaky_slope, inplace=True))
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_ch * cfg.feature_size * cfg.feature_size, cfg.dense_width),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            nn.Linear(cfg.dense_width, 1),
            nn.Sigmoid(),
        )

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        size = self.cfg.input_size
        if img.dim() != 4 or tuple(img.shape[1:]) != (3, size, size):
            raise DataError(f"Discriminator expects N x 3 x {size} x {size} input, got {tuple(img.shape)}")
        return self.classifier(self.features(img)).view(-1)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Deterministic init: He-uniform U(-sqrt(6/fan_in), +) weights, zero biases, BN scale 1 / shift 0."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, (nn.Conv2d, nn.Linear)):
                fan_in = layer.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                layer.weight.uniform_(-bound, bound, generator=generator)
                if layer.bias is not None:
                    layer.bias.zero_()
            elif isinstance(layer, nn.BatchNorm2d):
                layer.weight.fill_(1.0)
                layer.bias.zero_()
                layer.reset_running_stats()
    return module


def build_generator(cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> Generator:
    return init_params(Generator(cfg), seed)  # type: ignore[return-value]


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0) -> Discriminator:
    return init_params(Discriminator(cfg), seed)  # type: ignore[return-value]


def count_parameters(module: nn.Module) -> int:
    """Number of trainable parameters."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
