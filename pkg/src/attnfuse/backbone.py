"""Five-stage convolutional feature extractor and its local/global merge.

The stack is a compact trainable stand-in for a large pretrained model:
stages 1-2 run at full resolution and carry detail (local) features, stages
3-5 each halve the resolution first and carry semantic (global) features.
Weights are He-initialized from a seed and treated as fixed once built.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

STAGE_CHANNELS = (8, 8, 16, 32, 64)
GLOBAL_PROJ_CHANNELS = 16


@dataclass
class BackboneWeights:
    """Per-stage 3x3 kernel banks/biases plus 1x1 projections that bring
    stages 3-5 to a common channel width before the global-feature sum."""

    seed: int
    stage_kernels: list[np.ndarray]
    stage_biases: list[np.ndarray]
    proj_kernels: list[np.ndarray]

    @property
    def feature_channels(self) -> int:
        """Channels of concat(F_low, F_high)."""
        return STAGE_CHANNELS[0] + GLOBAL_PROJ_CHANNELS


def he_kernel(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    fan_in = in_ch * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))


def init_backbone(seed: int, in_channels: int = 1) -> BackboneWeights:
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    kernels, biases = [], []
    prev = in_channels
    for ch in STAGE_CHANNELS:
        kernels.append(he_kernel(rng, ch, prev, 3))
        biases.append(np.zeros(ch))
        prev = ch
    projs = [he_kernel(rng, GLOBAL_PROJ_CHANNELS, STAGE_CHANNELS[i], 1) for i in (2, 3, 4)]
    return BackboneWeights(seed=seed, stage_kernels=kernels, stage_biases=biases, proj_kernels=projs)


def extract_pyramid_t(image: Tensor, w: BackboneWeights) -> list[Tensor]:
    """Graph-building form: image tensor (1,H,W) -> 5 stage tensors."""
    h, wd = image.data.shape[-2:]
    if h % 8 or wd % 8:
        raise ValueError(f"image dims must be divisible by 8, got {h}x{wd}")
    x = image if image.data.ndim == 3 else ad.reshape(image, (1, h, wd))
    stages = []
    for i in range(5):
        if i >= 2:
            x = ad.downsample2_even(x)
        x = ad.relu(ad.conv2d(x, w.stage_kernels[i], bias=w.stage_biases[i], padding="same"))
        stages.append(x)
    return stages


def extract_pyramid(image, weights: BackboneWeights) -> list[np.ndarray]:
    """Image (H,W) -> 5 feature maps at resolutions H, H, H/2, H/4, H/8."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"expected 2-D image, got shape {image.shape}")
    return [t.data for t in extract_pyramid_t(Tensor(image[None]), weights)]


def fuse_local_global_t(stages: list[Tensor], w: BackboneWeights) -> tuple[Tensor, Tensor]:
    if len(stages) != 5:
        raise ShapeError(f"expected 5 pyramid stages, got {len(stages)}")
    full_h, full_w = stages[0].data.shape[-2:]
    if stages[1].data.shape[-2:] != (full_h, full_w):
        raise ShapeError("stage 2 must match stage 1 resolution")
    f_low = ad.add(stages[0], stages[1])
    parts = []
    for k, stage in enumerate(stages[2:]):
        expect = (full_h >> (k + 1), full_w >> (k + 1))
        if stage.data.shape[-2:] != expect:
            raise ShapeError(
                f"stage {k + 3} resolution {stage.data.shape[-2:]} != schedule {expect}"
            )
        proj = ad.conv2d(stage, w.proj_kernels[k], padding="same")
        parts.append(ad.upsample_bilinear(proj, 2 ** (k + 1)))
    f_high = ad.add(ad.add(parts[0], parts[1]), parts[2])
    return f_low, f_high


def fuse_local_global(stages, weights: BackboneWeights) -> tuple[np.ndarray, np.ndarray]:
    """Merge a 5-stage pyramid into full-resolution detail and semantic maps.

    F_low sums the two full-resolution stages; F_high projects stages 3-5 to
    a common width, upsamples each to full resolution, and sums them.
    """
    ts = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64)) for t in stages]
    lo, hi = fuse_local_global_t(ts, weights)
    return lo.data, hi.data


@dataclass
class MsrbWeights:
    """Two-branch multi-scale residual block: parallel 3x3 and 5x5 convs,
    concatenated and projected back by a 1x1 conv onto the residual path."""

    k3: np.ndarray
    b3: np.ndarray
    k5: np.ndarray
    b5: np.ndarray
    proj: np.ndarray
    pb: np.ndarray


def init_msrb(rng: np.random.Generator, channels: int) -> MsrbWeights:
    return MsrbWeights(
        k3=he_kernel(rng, channels, channels, 3),
        b3=np.zeros(channels),
        k5=he_kernel(rng, channels, channels, 5),
        b5=np.zeros(channels),
        proj=he_kernel(rng, channels, 2 * channels, 1),
        pb=np.zeros(channels),
    )


def msrb_t(x: Tensor, w: MsrbWeights) -> Tensor:
    a = ad.relu(ad.conv2d(x, w.k3, bias=w.b3, padding="same"))
    b = ad.relu(ad.conv2d(x, w.k5, bias=w.b5, padding="same"))
    merged = ad.conv2d(ad.concat_channels([a, b]), w.proj, bias=w.pb, padding="same")
    return ad.add(x, merged)


def msrb(x, weights: MsrbWeights) -> np.ndarray:
    """Residual multi-scale block; zero weights make it the identity."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != weights.k3.shape[1]:
        raise ShapeError(
            f"input shape {x.shape} incompatible with block of {weights.k3.shape[1]} channels"
        )
    return msrb_t(Tensor(x), weights).data
