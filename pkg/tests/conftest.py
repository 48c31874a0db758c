"""Shared fixtures."""

import os
import sys

import numpy as np
import pytest
import torch

# Add the repository root to the path so that `src` imports as a package
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.networks.features import load_extractor  # noqa: E402


@pytest.fixture(autouse=True)
def single_thread():
    """Deterministic single-threaded torch math."""
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def surrogate_fx():
    """Seeded surrogate VGG-16 extractor (no download)."""
    return load_extractor("surrogate", seed=1234)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def reference_vgg(img: np.ndarray, state, upto: str) -> np.ndarray:
    """VGG prefix evaluated from the layer definitions in float64.

    ``img`` is 3 x H x W in [0, 1] with even sides at every pooling stage;
    ``state`` maps ``convX_Y.weight`` / ``.bias`` to tensors.
    """
    from src.core.config import IMAGENET_MEAN, IMAGENET_STD
    from src.networks.features import VGG16_PLAN

    x = (img - np.array(IMAGENET_MEAN)[:, None, None]) / np.array(IMAGENET_STD)[:, None, None]
    for name, _, _ in VGG16_PLAN:
        if name == "pool":
            c, h, w = x.shape
            x = x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))
            continue
        weight = state[f"{name}.weight"].double().numpy()
        bias = state[f"{name}.bias"].double().numpy()
        _, h, w = x.shape
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.repeat(bias[:, None, None], h, axis=1).repeat(w, axis=2)
        for ky in range(3):
            for kx in range(3):
                out = out + np.einsum("oc,chw->ohw", weight[:, :, ky, kx], padded[:, ky:ky + h, kx:kx + w])
        x = np.maximum(out, 0.0)
        if name == upto:
            return x
    raise KeyError(upto)


@pytest.fixture(scope="session")
def vgg_reference():
    return reference_vgg
