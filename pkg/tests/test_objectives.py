"""Tests for the pixel, adversarial and targeted perceptual objectives."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from src.core.errors import ConfigError, DataError
from src.core.regions import OBBLabel
from src.networks.features import VGG16_PLAN, FeatureTap, load_extractor, surrogate_state
from src.networks.objectives import (
    LossWeights,
    adversarial_d,
    adversarial_g,
    masked_feature_distance,
    pixel_mse,
    targeted_perceptual_loss,
    total_generator_loss,
    whole_image_perceptual_loss,
)
from src.services.obb_labeler import masks_from_obb


def random_masks(rng: np.random.Generator, h: int, w: int):
    return masks_from_obb(OBBLabel(rng.integers(0, 3, size=(h, w)).astype(np.uint8)))


def mask_tensors(masks, dtype=torch.float32):
    return {name: torch.from_numpy(m).to(dtype) for name, m in masks.as_dict().items()}


@pytest.fixture(scope="module")
def pretrained_fx(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("vgg") / "vgg.pt")
    torch.save(surrogate_state(99), path)
    return load_extractor("pretrained", path)


class TestIdentityZero:
    def test_sr_equal_hr(self, surrogate_fx):
        rng = np.random.default_rng(1)
        weights = LossWeights(gamma=1.0, object_tap=FeatureTap.RELU_1_2)
        for _ in range(20):
            h, w = (int(v) for v in rng.integers(16, 41, size=2))
            hr = torch.from_numpy(rng.random((1, 3, h, w)).astype(np.float32))
            total, parts = targeted_perceptual_loss(surrogate_fx, hr.clone(), hr, random_masks(rng, h, w), weights)
            assert total.item() == 0.0
            assert all(v.item() == 0.0 for v in parts.values())

    def test_whole_image_zero(self, surrogate_fx):
        hr = torch.rand(1, 3, 24, 24)
        assert whole_image_perceptual_loss(surrogate_fx, hr.clone(), hr).item() == 0.0


class TestMaskSupport:
    @pytest.mark.parametrize("mode", ["surrogate", "pretrained"])
    def test_perturbation_outside_mask(self, mode, surrogate_fx, pretrained_fx):
        fx = surrogate_fx if mode == "surrogate" else pretrained_fx
        rng = np.random.default_rng(7)
        for case in range(20):
            h, w = (int(v) for v in rng.integers(16, 33, size=2))
            masks = random_masks(rng, h, w)
            name = ("object", "background", "boundary")[case % 3]
            tap = (FeatureTap.RELU_1_2, FeatureTap.RELU_2_2, FeatureTap.RELU_4_3)[case % 3]
            mask = torch.from_numpy(masks.as_dict()[name])

            hr = torch.from_numpy(rng.random((1, 3, h, w)).astype(np.float32))
            sr = torch.from_numpy(rng.random((1, 3, h, w)).astype(np.float32))
            noise = torch.from_numpy(rng.random((1, 3, h, w)).astype(np.float32))
            perturbed = sr + noise * (1 - mask)

            a = masked_feature_distance(fx, sr, hr, mask, tap)
            b = masked_feature_distance(fx, perturbed, hr, mask, tap)
            assert torch.equal(a, b)

    def test_gradient_zero_outside_mask(self, surrogate_fx):
        rng = np.random.default_rng(3)
        masks = random_masks(rng, 20, 20)
        mask = torch.from_numpy(masks.boundary)
        sr = torch.rand(1, 3, 20, 20, requires_grad=True)
        masked_feature_distance(surrogate_fx, sr, torch.rand(1, 3, 20, 20), mask, FeatureTap.RELU_2_2).backward()
        assert torch.all(sr.grad[:, :, mask == 0] == 0)


class TestLossReport:
    def test_exact_sum(self):
        fx = load_extractor("surrogate", seed=1234).double()
        rng = np.random.default_rng(11)
        weights = LossWeights(alpha=0.3, beta=0.7, gamma=0.2, w_mse=1.1, w_adv=0.05, object_tap=FeatureTap.RELU_1_2)
        sr = torch.from_numpy(rng.random((2, 3, 16, 16)))
        hr = torch.from_numpy(rng.random((2, 3, 16, 16)))
        d_fake = torch.tensor([0.3, 0.6], dtype=torch.float64)

        total, report = total_generator_loss(fx, sr, hr, mask_tensors(random_masks(rng, 16, 16), torch.float64), d_fake, weights)

        expected = (
            weights.w_mse * report["mse"]
            + weights.w_adv * report["adv_g"]
            + weights.alpha * report["perc_boundary"]
            + weights.beta * report["perc_background"]
            + weights.gamma * report["perc_object"]
        )
        assert report["total"] == expected
        assert total.item() == report["total"]

    def test_object_only_masks(self, surrogate_fx):
        sr, hr = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        masks = masks_from_obb(OBBLabel(np.zeros((16, 16), dtype=np.uint8)))
        _, report = total_generator_loss(surrogate_fx, sr, hr, masks, None, LossWeights())
        assert report["perc_boundary"] == 0.0
        assert report["perc_background"] == 0.0
        assert report["perc_object"] == 0.0
        assert report["adv_g"] == 0.0
        assert report["mse"] > 0.0

    def test_default_object_term_is_off(self, surrogate_fx):
        rng = np.random.default_rng(0)
        sr, hr = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        _, report = total_generator_loss(surrogate_fx, sr, hr, random_masks(rng, 16, 16), torch.tensor([0.5]), LossWeights())
        assert report["perc_object"] == 0.0
        assert report["adv_g"] == pytest.approx(math.log(2.0))


class TestValidation:
    def test_partition_violation(self, surrogate_fx):
        masks = {name: torch.ones(16, 16) for name in ("object", "background", "boundary")}
        with pytest.raises(DataError):
            targeted_perceptual_loss(surrogate_fx, torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16), masks, LossWeights())

    def test_misaligned_mask(self, surrogate_fx):
        rng = np.random.default_rng(0)
        with pytest.raises(DataError):
            targeted_perceptual_loss(
                surrogate_fx, torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16), random_masks(rng, 12, 16), LossWeights()
            )

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            pixel_mse(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 9))

    def test_weights(self):
        with pytest.raises(ConfigError):
            LossWeights(alpha=-1.0)
        with pytest.raises(ConfigError):
            LossWeights(gamma=0.5)


class TestAdversarial:
    def test_values(self):
        half = torch.tensor([0.5, 0.5])
        assert adversarial_g(half).item() == pytest.approx(math.log(2.0))
        assert adversarial_d(half, half).item() == pytest.approx(2 * math.log(2.0))

    def test_clamped_extremes_are_finite(self):
        assert math.isfinite(adversarial_g(torch.tensor([0.0])).item())
        assert math.isfinite(adversarial_d(torch.tensor([0.0]), torch.tensor([1.0])).item())

    def test_not_a_probability(self):
        with pytest.raises(DataError):
            adversarial_g(torch.tensor([1.5]))
        with pytest.raises(DataError):
            adversarial_d(torch.tensor([float("nan")]), torch.tensor([0.5]))


def activation_pattern(fx, img: torch.Tensor) -> list:
    """ReLU signs and max-pool argmax indices of the whole tap stack."""
    pattern = []
    x = fx.preprocess(img)
    for name, _, _ in VGG16_PLAN:
        if name == "pool":
            x, idx = F.max_pool2d(x, 2, 2, ceil_mode=True, return_indices=True)
            pattern.append(idx)
            continue
        pre = fx.convs[name](x)
        pattern.append(pre > 0)
        x = F.relu(pre)
    return pattern


def same_pattern(a: list, b: list) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a, b))


class TestGradientCheck:
    """Analytic gradient of the full generator objective vs central differences."""

    def test_central_differences(self):
        fx = load_extractor("surrogate", seed=21).double()
        rng = np.random.default_rng(5)
        weights = LossWeights(alpha=1.0, beta=1.0, gamma=1.0, w_mse=1.0, w_adv=1.0, object_tap=FeatureTap.RELU_1_2)
        masks = mask_tensors(random_masks(rng, 8, 8), torch.float64)
        hr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        sr0 = torch.from_numpy(rng.random((1, 3, 8, 8)))

        def objective(sr: torch.Tensor) -> torch.Tensor:
            total, _ = total_generator_loss(fx, sr, hr, masks, torch.sigmoid(sr.mean()).view(1), weights)
            return total

        sr = sr0.clone().requires_grad_(True)
        objective(sr).backward()
        analytic = sr.grad.detach()

        def patterns(img):
            return [activation_pattern(fx, img * m) for m in masks.values()]

        h = 1e-4
        base = patterns(sr0)
        checked = 0
        for flat in rng.permutation(sr0.numel()):
            if checked == 10:
                break
            e = torch.zeros_like(sr0).view(-1)
            e[flat] = h
            e = e.view_as(sr0)
            plus, minus = sr0 + e, sr0 - e
            # skip coordinates whose perturbation crosses a ReLU or pooling switch
            if not all(same_pattern(a, b) for a, b in zip(base, patterns(plus))):
                continue
            if not all(same_pattern(a, b) for a, b in zip(base, patterns(minus))):
                continue
            with torch.no_grad():
                fd = (objective(plus) - objective(minus)).item() / (2 * h)
            an = analytic.view(-1)[flat].item()
            rel = abs(fd - an) / max(abs(an), abs(fd), 1e-6)
            assert rel < 1e-4, f"coordinate {flat}: fd={fd} analytic={an}"
            checked += 1
        assert checked == 10


class TestReferencePipeline:
    """Objectives against masking, definition-level convolutions and a mean-square reduction."""

    @pytest.fixture(scope="class")
    def fx64(self):
        return load_extractor("surrogate", seed=1234).double()

    def reference_distance(self, vgg_reference, sr, hr, mask, tap):
        state = surrogate_state(1234)
        a = vgg_reference(sr * mask, state, tap.conv_name)
        b = vgg_reference(hr * mask, state, tap.conv_name)
        return float(np.mean((a - b) ** 2))

    def test_masked_feature_distance(self, fx64, vgg_reference):
        rng = np.random.default_rng(17)
        sr, hr = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        mask = random_masks(rng, 16, 16).boundary.astype(np.float64)

        ours = masked_feature_distance(
            fx64, torch.from_numpy(sr)[None], torch.from_numpy(hr)[None], torch.from_numpy(mask), FeatureTap.RELU_2_2
        )
        expected = self.reference_distance(vgg_reference, sr, hr, mask, FeatureTap.RELU_2_2)
        assert ours.item() == pytest.approx(expected, rel=1e-9)

    def test_targeted_loss_term_by_term(self, fx64, vgg_reference):
        rng = np.random.default_rng(18)
        sr, hr = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        masks = random_masks(rng, 16, 16)
        weights = LossWeights(alpha=0.4, beta=2.5)

        total, _ = targeted_perceptual_loss(
            fx64, torch.from_numpy(sr)[None], torch.from_numpy(hr)[None], mask_tensors(masks, torch.float64), weights
        )
        expected = (
            weights.alpha * self.reference_distance(vgg_reference, sr, hr, masks.boundary, weights.boundary_tap)
            + weights.beta * self.reference_distance(vgg_reference, sr, hr, masks.background, weights.background_tap)
        )
        assert total.item() == pytest.approx(expected, rel=1e-9)


class TestWeightLinearity:
    def test_zero_alpha_beta(self, surrogate_fx):
        rng = np.random.default_rng(4)
        for _ in range(5):
            sr, hr = torch.rand(2, 3, 24, 24), torch.rand(2, 3, 24, 24)
            total, _ = targeted_perceptual_loss(surrogate_fx, sr, hr, random_masks(rng, 24, 24), LossWeights(alpha=0.0, beta=0.0))
            assert total.item() == 0.0

    @pytest.mark.parametrize("k", [0.5, 4.0, 1024.0])
    def test_alpha_scales_boundary_contribution(self, k):
        fx = load_extractor("surrogate", seed=1234).double()
        rng = np.random.default_rng(9)
        sr = torch.from_numpy(rng.random((1, 3, 16, 16)))
        hr = torch.from_numpy(rng.random((1, 3, 16, 16)))
        masks = mask_tensors(random_masks(rng, 16, 16), torch.float64)

        def boundary_contribution(alpha: float) -> float:
            weights = LossWeights(alpha=alpha, beta=0.0, w_mse=0.0, w_adv=0.0)
            total, report = total_generator_loss(fx, sr, hr, masks, None, weights)
            assert report["perc_boundary"] > 0.0
            return total.item()

        assert boundary_contribution(0.3 * k) == k * boundary_contribution(0.3)
