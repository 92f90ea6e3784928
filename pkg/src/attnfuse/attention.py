"""Channel attention, spatial attention, and cross-modal saliency fusion.

The detector runs each modality through the shared backbone, reweights
channels (squeeze-excitation style), collapses to a per-pixel map, and then
combines the two modality maps under a fusion criterion. The learned
criterion is a per-pixel convex combination whose weights come from a small
convolution over both maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import Tensor
from .errors import ModelError, ShapeError

CRITERION_MODES = ("first", "mean", "max", "learned")


@dataclass
class CamWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class PamWeights:
    kernel: np.ndarray  # (1, 2, 7, 7) over [channel-mean, channel-max]
    bias: np.ndarray


@dataclass
class AttentionWeights:
    cam: CamWeights
    pam: PamWeights
    crit_kernel: np.ndarray  # (2, 2, 3, 3) logit head for the learned criterion
    crit_bias: np.ndarray
    mode: str = "learned"


@dataclass
class FusionCriterion:
    """How two modality saliency maps combine per pixel.

    mode `first` takes the first map, `mean` averages, `max` takes the larger
    value, `learned` applies a per-pixel softmax over `logits` (2,H,W).
    """

    mode: str = "mean"
    logits: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.mode not in CRITERION_MODES:
            raise ValueError(f"mode must be one of {CRITERION_MODES}, got {self.mode!r}")


def init_cam(rng: np.random.Generator, channels: int, ratio: int = 4) -> CamWeights:
    if channels % ratio:
        raise ValueError(f"reduction ratio {ratio} does not divide {channels} channels")
    hidden = channels // ratio
    return CamWeights(
        w1=rng.normal(0.0, np.sqrt(2.0 / channels), size=(hidden, channels)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, np.sqrt(2.0 / hidden), size=(channels, hidden)),
        b2=np.zeros(channels),
    )


def init_pam(rng: np.random.Generator) -> PamWeights:
    # bias -2 starts maps near the background level, which concentrates the
    # supervised-phase gradient on salient regions instead of a flat 0.5 map
    return PamWeights(kernel=bb.he_kernel(rng, 1, 2, 7), bias=np.full(1, -2.0))


def init_attention(seed: int, channels: int, mode: str = "learned") -> AttentionWeights:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return AttentionWeights(
        cam=init_cam(rng, channels),
        pam=init_pam(rng),
        crit_kernel=bb.he_kernel(rng, 2, 2, 3),
        crit_bias=np.zeros(2),
        mode=mode,
    )


def channel_attention_t(x: Tensor, w: CamWeights) -> Tensor:
    c = x.data.shape[0]
    if w.w1.shape[1] != c:
        raise ShapeError(f"CAM built for {w.w1.shape[1]} channels, input has {c}")
    pooled = ad.global_avg_pool(x)
    hidden = ad.relu(ad.linear(pooled, w.w1, w.b1))
    scales = ad.sigmoid(ad.linear(hidden, w.w2, w.b2))
    return ad.mul(x, ad.reshape(scales, (c, 1, 1)))


def channel_attention(x, weights: CamWeights) -> np.ndarray:
    """Scale each channel by sigmoid(MLP(global average pool)); scales in (0,1)."""
    return channel_attention_t(Tensor(np.asarray(x, dtype=np.float64)), weights).data


def spatial_attention_t(x: Tensor, w: PamWeights) -> Tensor:
    pooled = ad.concat_channels([ad.channel_mean(x), ad.channel_max(x)])
    logits = ad.conv2d(pooled, w.kernel, bias=w.bias, padding="same")
    return ad.sigmoid(logits)


def spatial_attention(x, weights: PamWeights) -> np.ndarray:
    """Per-pixel saliency in (0,1) from channel-pooled features. Returns (H,W)."""
    out = spatial_attention_t(Tensor(np.asarray(x, dtype=np.float64)), weights)
    return out.data[0]


def _combine_t(s_a: Tensor, s_b: Tensor, mode: str, logits) -> Tensor:
    if mode == "first":
        return ad.add(s_a, 0.0)
    if mode == "mean":
        return ad.mul(ad.add(s_a, s_b), 0.5)
    if mode == "max":
        both = ad.concat_channels([ad.reshape(s_a, (1,) + s_a.data.shape),
                                   ad.reshape(s_b, (1,) + s_b.data.shape)])
        return ad.reshape(ad.channel_max(both), s_a.data.shape)
    if mode == "learned":
        if logits is None:
            raise ValueError("learned criterion requires logits")
        l0, l1 = logits
        alpha = ad.sigmoid(ad.sub(l0, l1))
        # s_b + alpha*(s_a - s_b): convex combination, exact on equal inputs
        return ad.add(s_b, ad.mul(alpha, ad.sub(s_a, s_b)))
    raise ValueError(f"unknown criterion mode {mode!r}")


def attention_fuse(s_a, s_b, criterion: FusionCriterion) -> np.ndarray:
    """Per-pixel combination of two saliency maps, clamped to [0,1]."""
    s_a = np.asarray(s_a, dtype=np.float64)
    s_b = np.asarray(s_b, dtype=np.float64)
    if s_a.shape != s_b.shape:
        raise ShapeError(f"saliency shapes differ: {s_a.shape} vs {s_b.shape}")
    logits = None
    if criterion.mode == "learned":
        if criterion.logits is None:
            raise ValueError("learned criterion requires per-pixel logits")
        lg = np.asarray(criterion.logits, dtype=np.float64)
        if lg.shape != (2,) + s_a.shape:
            raise ShapeError(f"logits shape {lg.shape} != (2,)+{s_a.shape}")
        logits = (Tensor(lg[0]), Tensor(lg[1]))
    fused = _combine_t(Tensor(s_a), Tensor(s_b), criterion.mode, logits)
    return ad.clamp01(fused).data


def detect_attention_t(image_a: Tensor, image_b: Tensor, model) -> Tensor:
    """Graph form of the cross-modal detector; returns a (H,W)-shaped tensor."""
    if model.attention is None:
        raise ModelError("model has no attention subnet")
    feats = []
    for img, net in ((image_a, model.backbone), (image_b, model.backbone_for_b())):
        stages = bb.extract_pyramid_t(img, net)
        lo, hi = bb.fuse_local_global_t(stages, net)
        feats.append(ad.concat_channels([lo, hi]))
    return detect_from_features_t(feats[0], feats[1], model.attention)


def detect_from_features_t(feat_a: Tensor, feat_b: Tensor, aw: AttentionWeights) -> Tensor:
    maps = []
    for f in (feat_a, feat_b):
        scaled = channel_attention_t(f, aw.cam)
        maps.append(spatial_attention_t(scaled, aw.pam))
    s_a, s_b = maps
    hw = s_a.data.shape[-2:]
    sa2 = ad.reshape(s_a, hw)
    sb2 = ad.reshape(s_b, hw)
    if aw.mode == "learned":
        raw = ad.conv2d(ad.concat_channels([s_a, s_b]), aw.crit_kernel,
                        bias=aw.crit_bias, padding="same")
        lg0 = ad.reshape(_slice_channel(raw, 0), hw)
        lg1 = ad.reshape(_slice_channel(raw, 1), hw)
        fused = _combine_t(sa2, sb2, "learned", (lg0, lg1))
    else:
        fused = _combine_t(sa2, sb2, aw.mode, None)
    return ad.clamp01(fused)


def _slice_channel(x: Tensor, i: int) -> Tensor:
    """(C,H,W) -> (1,H,W) single-channel view with gradient."""
    c = x.data.shape[0]

    def vjp(g):
        buf = np.zeros_like(x.data)
        buf[i] = g[0]
        return buf

    return Tensor._node(x.data[i:i + 1], (x,), (vjp,))


def detect_attention(image_a, image_b, model) -> np.ndarray:
    """End-to-end cross-modal saliency map in [0,1], aligned to the inputs."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return detect_attention_t(Tensor(a[None]), Tensor(b[None]), model).data
