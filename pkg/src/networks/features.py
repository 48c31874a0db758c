"""VGG-16 feature taps for the perceptual terms.

Two modes share one topology (conv1_1 .. conv4_3, 3x3 convolutions, 2x2 max
pooling with ceil rounding):

* ``pretrained`` loads ImageNet weights from a named-layer archive
  (``conv1_1.weight`` ... ``conv4_3.bias``), see ``export_vgg16_archive``;
* ``surrogate`` draws the same shapes from a seeded generator so tests and
  desk runs need no download.

Inputs are [0, 1] RGB tensors normalised with ImageNet statistics.
"""

import json
import logging
import os
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.config import IMAGENET_MEAN, IMAGENET_STD
from ..core.errors import ConfigError, DataError
from ..core.utils import tensor_fingerprint

logger = logging.getLogger("tpsr.features")

# (name, in_channels, out_channels); "pool" entries are 2x2 / stride 2 max pooling.
VGG16_PLAN: Tuple[Tuple[str, int, int], ...] = (
    ("conv1_1", 3, 64), ("conv1_2", 64, 64), ("pool", 0, 0),
    ("conv2_1", 64, 128), ("conv2_2", 128, 128), ("pool", 0, 0),
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), ("pool", 0, 0),
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512),
)

# torchvision vgg16().features indices of the conv layers above
TORCHVISION_CONV_INDEX = {
    "conv1_1": 0, "conv1_2": 2, "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14,
    "conv4_1": 17, "conv4_2": 19, "conv4_3": 21,
}


class FeatureTap(str, Enum):
    RELU_1_2 = "relu1_2"
    RELU_2_2 = "relu2_2"
    RELU_4_1 = "relu4_1"
    RELU_4_3 = "relu4_3"

    @property
    def conv_name(self) -> str:
        return "conv" + self.value[len("relu"):]

    @property
    def layer_index(self) -> int:
        """Index of the ReLU in torchvision's vgg16().features."""
        return TORCHVISION_CONV_INDEX[self.conv_name] + 1

    @property
    def channels(self) -> int:
        return dict((name, out) for name, _, out in VGG16_PLAN)[self.conv_name]

    @property
    def downsample(self) -> int:
        factor = 1
        for name, _, _ in VGG16_PLAN:
            if name == self.conv_name:
                return factor
            if name == "pool":
                factor *= 2
        raise AssertionError(self)

    @classmethod
    def parse(cls, value: str) -> "FeatureTap":
        normalized = value.lower().replace("-", "_").replace(" ", "")
        for tap in cls:
            if normalized in (tap.value, tap.name.lower(), tap.value.replace("_", "")):
                return tap
        raise ConfigError(f"Unknown feature tap '{value}'")


def receptive_field(tap: FeatureTap) -> int:
    """Side length (pixels) of the input region seen by one unit at the tap."""
    field, jump = 1, 1
    for name, _, _ in VGG16_PLAN:
        if name == "pool":
            field += jump
            jump *= 2
        else:
            field += 2 * jump
        if name == tap.conv_name:
            return field
    raise AssertionError(tap)


def weight_manifest() -> Dict[str, List[int]]:
    """Expected archive tensor names and shapes."""
    manifest: Dict[str, List[int]] = {}
    for name, cin, cout in VGG16_PLAN:
        if name == "pool":
            continue
        manifest[f"{name}.weight"] = [cout, cin, 3, 3]
        manifest[f"{name}.bias"] = [cout]
    return manifest


def manifest_path_for(archive_path: str) -> str:
    return f"{archive_path}.manifest.json"


class FeatureExtractor(nn.Module):
    """Frozen VGG-16 prefix returning activations at named taps."""

    def __init__(self, mode: str, state: Dict[str, torch.Tensor], seed: Optional[int] = None):
        super().__init__()
        self.mode = mode
        self.seed = seed
        self.convs = nn.ModuleDict()
        for name, cin, cout in VGG16_PLAN:
            if name != "pool":
                self.convs[name] = nn.Conv2d(cin, cout, kernel_size=3, padding=1)

        with torch.no_grad():
            for name, conv in self.convs.items():
                conv.weight.copy_(state[f"{name}.weight"])
                conv.bias.copy_(state[f"{name}.bias"])

        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._fingerprint = self.fingerprint()

    def train(self, mode: bool = True) -> "FeatureExtractor":
        # Always in eval mode.
        return super().train(False)

    def fingerprint(self) -> str:
        return tensor_fingerprint(p.detach().double() for p in self.parameters())

    def assert_frozen(self) -> None:
        if any(p.requires_grad for p in self.parameters()):
            raise RuntimeError("Feature extractor parameters require grad")
        if self.fingerprint() != self._fingerprint:
            raise RuntimeError("Feature extractor parameters changed after construction")

    def preprocess(self, img: torch.Tensor) -> torch.Tensor:
        return (img - self.mean.to(img.dtype)) / self.std.to(img.dtype)

    def extract_taps(self, img: torch.Tensor, taps: Iterable[FeatureTap]) -> Dict[FeatureTap, torch.Tensor]:
        """One forward pass returning the feature map at every requested tap."""
        wanted = {tap.conv_name: tap for tap in taps}
        if not wanted:
            return {}
        if img.dim() != 4 or img.size(1) != 3:
            raise DataError(f"Expected an N x 3 x H x W tensor, got {tuple(img.shape)}")
        factor = max(tap.downsample for tap in wanted.values())
        if min(img.shape[-2:]) < factor:
            raise DataError(f"Image {tuple(img.shape[-2:])} too small for taps needing downsampling x{factor}")

        out: Dict[FeatureTap, torch.Tensor] = {}
        x = self.preprocess(img)
        for name, _, _ in VGG16_PLAN:
            if name == "pool":
                x = F.max_pool2d(x, kernel_size=2, stride=2, ceil_mode=True)
                continue
            x = F.relu(self.convs[name](x))
            if name in wanted:
                out[wanted[name]] = x
                if len(out) == len(wanted):
                    break
        return out

    def extract(self, img: torch.Tensor, tap: FeatureTap) -> torch.Tensor:
        return self.extract_taps(img, [tap])[tap]

    def forward(self, img: torch.Tensor, tap: FeatureTap = FeatureTap.RELU_2_2) -> torch.Tensor:
        return self.extract(img, tap)


def surrogate_state(seed: int) -> Dict[str, torch.Tensor]:
    """Seeded fan-in scaled weights with the VGG-16 prefix shapes."""
    generator = torch.Generator().manual_seed(seed)
    state: Dict[str, torch.Tensor] = {}
    for name, shape in weight_manifest().items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = (6.0 / fan_in) ** 0.5
        else:
            bound = 0.1
        state[name] = torch.empty(shape).uniform_(-bound, bound, generator=generator)
    return state


def read_weight_archive(path: str) -> Dict[str, torch.Tensor]:
    """Load and validate a named-layer archive against ``weight_manifest``."""
    if not os.path.isfile(path):
        raise DataError(f"VGG-16 weight archive not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise DataError(f"Could not read weight archive: {path}: {e}") from e
    if not isinstance(state, dict):
        raise DataError(f"Weight archive must hold a name -> tensor mapping: {path}")

    for name, shape in weight_manifest().items():
        if name not in state:
            raise DataError(f"Weight archive {path} is missing layer '{name}'")
        found = list(state[name].shape)
        if found != shape:
            raise DataError(f"Weight archive {path}: layer '{name}' has shape {found}, expected {shape}")
    return {name: state[name].float() for name in weight_manifest()}


def load_extractor(mode: str, weights_path: Optional[str] = None, seed: Optional[int] = None) -> FeatureExtractor:
    """Build a frozen extractor in ``pretrained`` or ``surrogate`` mode."""
    if mode == "surrogate":
        if seed is None:
            raise ConfigError("Surrogate extractor requires a seed")
        logger.info(f"Using surrogate VGG-16 extractor (seed={seed})")
        return FeatureExtractor("surrogate", surrogate_state(seed), seed=seed)

    if mode == "pretrained":
        if not weights_path:
            raise ConfigError("Pretrained extractor requires a weight archive path")
        state = read_weight_archive(weights_path)
        logger.info(f"Loaded pretrained VGG-16 taps from {weights_path}")
        return FeatureExtractor("pretrained", state)

    raise ConfigError(f"Unknown extractor mode '{mode}' (expected pretrained or surrogate)")


def export_vgg16_archive(path: str) -> str:
    """Write torchvision's ImageNet VGG-16 conv1_1..conv4_3 as a named archive plus manifest."""
    from torchvision.models import VGG16_Weights, vgg16

    features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
    state: Dict[str, torch.Tensor] = {}
    for name, index in TORCHVISION_CONV_INDEX.items():
        state[f"{name}.weight"] = features[index].weight.detach().clone()
        state[f"{name}.bias"] = features[index].bias.detach().clone()

    torch.save(state, path)
    with open(manifest_path_for(path), "w", encoding="utf-8") as f:
        json.dump(weight_manifest(), f, indent=2)
        f.write("\n")
    logger.info(f"Exported VGG-16 archive to {path}")
    return path
