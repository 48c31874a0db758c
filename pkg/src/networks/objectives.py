"""Loss terms: pixel MSE, adversarial pair and the region-targeted perceptual loss.

Masks are applied in image space before feature extraction, so changes to the
super-resolved image outside a term's mask never reach that term.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from ..core.config import ALPHA, BETA, EPS_PROB, GAMMA, W_ADV, W_MSE
from ..core.errors import ConfigError, DataError
from ..core.models import LossReport
from ..core.regions import MaskSet
from .features import FeatureExtractor, FeatureTap

logger = logging.getLogger("tpsr.objectives")

MaskLike = Union[torch.Tensor, np.ndarray]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the generator objective and the taps of each perceptual term."""
    alpha: float = ALPHA
    beta: float = BETA
    gamma: float = GAMMA
    w_mse: float = W_MSE
    w_adv: float = W_ADV
    boundary_tap: FeatureTap = FeatureTap.RELU_2_2
    background_tap: FeatureTap = FeatureTap.RELU_4_3
    object_tap: Optional[FeatureTap] = None

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "w_mse", "w_adv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"Loss weight {name} must be non-negative, got {getattr(self, name)}")
        if self.gamma != 0 and self.object_tap is None:
            raise ConfigError("A nonzero gamma needs an object_tap")

    def as_dict(self) -> Dict[str, object]:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "w_mse": self.w_mse,
            "w_adv": self.w_adv,
            "boundary_tap": self.boundary_tap.value,
            "background_tap": self.background_tap.value,
            "object_tap": self.object_tap.value if self.object_tap else None,
        }


def _check_pair(sr: torch.Tensor, hr: torch.Tensor) -> None:
    if sr.shape != hr.shape:
        raise DataError(f"SR/HR shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")


def as_mask_tensor(mask: MaskLike, like: torch.Tensor) -> torch.Tensor:
    """Broadcastable N x 1 x H x W mask in the dtype/device of ``like``."""
    m = torch.as_tensor(mask)
    if m.dim() == 2:
        m = m.view(1, 1, *m.shape)
    elif m.dim() == 3:
        m = m.unsqueeze(1)
    if m.shape[-2:] != like.shape[-2:]:
        raise DataError(f"Mask {tuple(m.shape[-2:])} not aligned with image {tuple(like.shape[-2:])}")
    return m.to(dtype=like.dtype, device=like.device)


def masked_feature_distance(
    fx: FeatureExtractor,
    sr: torch.Tensor,
    hr: torch.Tensor,
    mask: MaskLike,
    tap: FeatureTap,
) -> torch.Tensor:
    """Mean squared difference of tap features of the masked SR and HR images."""
    _check_pair(sr, hr)
    m = as_mask_tensor(mask, sr)
    phi_sr = fx.extract(sr * m, tap)
    with torch.no_grad():
        phi_hr = fx.extract(hr * m, tap)
    return torch.mean((phi_sr - phi_hr) ** 2)


def _mask_tensors(masks: Union[MaskSet, Dict[str, MaskLike]], like: torch.Tensor) -> Dict[str, torch.Tensor]:
    items = masks.as_dict() if isinstance(masks, MaskSet) else masks
    tensors = {name: as_mask_tensor(items[name], like) for name in ("object", "background", "boundary")}
    total = tensors["object"] + tensors["background"] + tensors["boundary"]
    if not torch.all(total == 1):
        raise DataError("OBB masks do not partition the frame")
    return tensors


def targeted_perceptual_loss(
    fx: FeatureExtractor,
    sr: torch.Tensor,
    hr: torch.Tensor,
    masks: Union[MaskSet, Dict[str, MaskLike]],
    weights: LossWeights,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """alpha * G_e(boundary) + beta * G_b(background) + gamma * G_o(object)."""
    _check_pair(sr, hr)
    m = _mask_tensors(masks, sr)

    zero = sr.new_zeros(())
    components = {
        "perc_boundary": masked_feature_distance(fx, sr, hr, m["boundary"], weights.boundary_tap),
        "perc_background": masked_feature_distance(fx, sr, hr, m["background"], weights.background_tap),
        "perc_object": zero,
    }
    if weights.gamma != 0 and weights.object_tap is not None:
        components["perc_object"] = masked_feature_distance(fx, sr, hr, m["object"], weights.object_tap)

    total = (
        weights.alpha * components["perc_boundary"]
        + weights.beta * components["perc_background"]
        + weights.gamma * components["perc_object"]
    )
    return total, components


def whole_image_perceptual_loss(
    fx: FeatureExtractor,
    sr: torch.Tensor,
    hr: torch.Tensor,
    tap: FeatureTap = FeatureTap.RELU_2_2,
) -> torch.Tensor:
    """Untargeted perceptual term over the full frame (SRGAN-style ablation baseline)."""
    return masked_feature_distance(fx, sr, hr, torch.ones(sr.shape[-2:]), tap)


def pixel_mse(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    _check_pair(sr, hr)
    return torch.mean((sr - hr) ** 2)


def _clamped_probabilities(d_out: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.all(torch.isfinite(d_out)) or torch.any(d_out < 0) or torch.any(d_out > 1):
        raise DataError(f"Discriminator output '{name}' is not a probability")
    return d_out.clamp(EPS_PROB, 1.0 - EPS_PROB)


def adversarial_g(d_out_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: mean(-log D(fake))."""
    fake = _clamped_probabilities(d_out_fake, "fake")
    return torch.mean(-torch.log(fake))


def adversarial_d(d_out_real: torch.Tensor, d_out_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: mean(-log D(real) - log(1 - D(fake)))."""
    real = _clamped_probabilities(d_out_real, "real")
    fake = _clamped_probabilities(d_out_fake, "fake")
    return torch.mean(-torch.log(real) - torch.log(1.0 - fake))


def total_generator_loss(
    fx: FeatureExtractor,
    sr: torch.Tensor,
    hr: torch.Tensor,
    masks: Union[MaskSet, Dict[str, MaskLike]],
    d_out_fake: Optional[torch.Tensor],
    weights: LossWeights,
) -> Tuple[torch.Tensor, LossReport]:
    """Full generator objective and its per-component report.

    ``d_out_fake`` may be None to evaluate without an adversarial term
    (adv_g is then reported as 0).
    """
    mse = pixel_mse(sr, hr)
    adv = adversarial_g(d_out_fake) if d_out_fake is not None else sr.new_zeros(())
    _, perc = targeted_perceptual_loss(fx, sr, hr, masks, weights)

    total = (
        weights.w_mse * mse
        + weights.w_adv * adv
        + weights.alpha * perc["perc_boundary"]
        + weights.beta * perc["perc_background"]
        + weights.gamma * perc["perc_object"]
    )
    report: LossReport = {
        "total": float(total.detach()),
        "mse": float(mse.detach()),
        "adv_g": float(adv.detach()),
        "perc_boundary": float(perc["perc_boundary"].detach()),
        "perc_background": float(perc["perc_background"].detach()),
        "perc_object": float(perc["perc_object"].detach()),
    }
    return total, report
