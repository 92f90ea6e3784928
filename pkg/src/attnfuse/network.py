"""Model assembly: the full parameter container, the enhancement autoencoder,
the triangular multitask layer composition, the attention-gated fusion
forward pass, and the binary model container format.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import attention as att
from .autodiff import Tensor
from .errors import ModelError, ShapeError
from .params import iter_arrays, lift

MAGIC = b"ATNF"
FORMAT_VERSION = 1
FAMILIES = ("backbone", "attention", "enhance", "fusion", "wiring")
PHASES = ("attention", "enhance", "main")

ENHANCE_CHANNELS = 16
WIRING_CHANNELS = 16
WIRING_TASKS = 3
WIRING_LAYERS = 3


@dataclass
class ConvWeights:
    kernel: np.ndarray
    bias: np.ndarray


@dataclass
class EnhanceWeights:
    """Stacked autoencoder with dense skips: every encoder stage feeds every
    same-or-later decoder stage. All stages run at full resolution."""

    enc: list[ConvWeights]
    dec: list[ConvWeights]
    out: ConvWeights


@dataclass
class FusionHeadWeights:
    msrb_ab: list[bb.MsrbWeights]  # shared between the two gated-image branches
    msrb_en: list[bb.MsrbWeights]
    cam: att.CamWeights
    merge: ConvWeights
    out: ConvWeights


@dataclass
class TaskLayerWiring:
    """One layer of the triangular multitask composition: each task owns a
    conv, plus bias-free cross kernels from every lower-indexed task."""

    own: list[ConvWeights]
    cross: list[list[np.ndarray]]  # cross[l][j] maps task j's input into task l


@dataclass
class MultitaskWiring:
    layers: list[TaskLayerWiring]


@dataclass
class ModelGraph:
    seed: int
    backbone: bb.BackboneWeights
    attention: att.AttentionWeights
    enhance: EnhanceWeights
    fusion: FusionHeadWeights
    wiring: MultitaskWiring
    backbone_b: bb.BackboneWeights | None = None
    freeze: dict = field(default_factory=lambda: {f: False for f in FAMILIES})
    trained_phases: list = field(default_factory=list)

    def backbone_for_b(self) -> bb.BackboneWeights:
        return self.backbone_b if self.backbone_b is not None else self.backbone

    def named_parameters(self) -> dict[str, np.ndarray]:
        skip = {"freeze", "trained_phases"}
        out: dict[str, np.ndarray] = {}
        for name, arr in iter_arrays(self):
            if name.split(".", 1)[0] not in skip:
                out[name] = arr
        return out


@dataclass
class FusionOutput:
    fused: np.ndarray      # (H,W) in [0,1]
    saliency: np.ndarray   # (H,W) in [0,1]
    enhanced: np.ndarray   # (C,H,W) gated enhancement features (diagnostic)


def family_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return "backbone" if head == "backbone_b" else head


def init_enhance(seed: int) -> EnhanceWeights:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    c = ENHANCE_CHANNELS
    enc_in = (2, c, c)
    enc = [ConvWeights(bb.he_kernel(rng, c, ci, 3), np.zeros(c)) for ci in enc_in]
    dec_in = (3 * c, 4 * c, 4 * c)
    dec = [ConvWeights(bb.he_kernel(rng, c, ci, 3), np.zeros(c)) for ci in dec_in]
    return EnhanceWeights(enc=enc, dec=dec, out=ConvWeights(bb.he_kernel(rng, 1, c, 3), np.zeros(1)))


def init_fusion_head(seed: int, branch_channels: int) -> FusionHeadWeights:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    en = ENHANCE_CHANNELS
    merged = 2 * branch_channels + en
    return FusionHeadWeights(
        msrb_ab=[bb.init_msrb(rng, branch_channels) for _ in range(2)],
        msrb_en=[bb.init_msrb(rng, en) for _ in range(2)],
        cam=att.init_cam(rng, merged),
        merge=ConvWeights(bb.he_kernel(rng, 16, merged, 3), np.zeros(16)),
        out=ConvWeights(bb.he_kernel(rng, 1, 16, 1), np.zeros(1)),
    )


def init_wiring(seed: int) -> MultitaskWiring:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    c = WIRING_CHANNELS
    layers = []
    for _ in range(WIRING_LAYERS):
        own = [ConvWeights(bb.he_kernel(rng, c, c, 3), np.zeros(c)) for _ in range(WIRING_TASKS)]
        cross = [[bb.he_kernel(rng, c, c, 3) for _ in range(l)] for l in range(WIRING_TASKS)]
        layers.append(TaskLayerWiring(own=own, cross=cross))
    return MultitaskWiring(layers=layers)


def init_model(seed: int, criterion_mode: str = "learned") -> ModelGraph:
    net = bb.init_backbone(seed)
    return ModelGraph(
        seed=seed,
        backbone=net,
        attention=att.init_attention(seed, net.feature_channels, mode=criterion_mode),
        enhance=init_enhance(seed),
        fusion=init_fusion_head(seed, net.feature_channels),
        wiring=init_wiring(seed),
    )


# -- multitask composition -----------------------------------------------------


def multitask_layer_t(inputs: list[Tensor], layer: TaskLayerWiring) -> list[Tensor]:
    if len(inputs) != len(layer.own):
        raise ShapeError(f"{len(inputs)} task inputs for wiring of {len(layer.own)} tasks")
    outs = []
    for l, x in enumerate(inputs):
        acc = ad.conv2d(x, layer.own[l].kernel, bias=layer.own[l].bias, padding="same")
        for j in range(l):
            acc = ad.add(acc, ad.conv2d(inputs[j], layer.cross[l][j], padding="same"))
        outs.append(ad.relu(acc))
    return outs


def multitask_layer(inputs, layer: TaskLayerWiring) -> list[np.ndarray]:
    """One composition layer: task l sees its own conv plus bias-free
    contributions from every task j < l, then ReLU. Lower tasks never see
    higher-task inputs.
    """
    ts = [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    return [t.data for t in multitask_layer_t(ts, layer)]


def multitask_stack(inputs, wiring: MultitaskWiring) -> list[np.ndarray]:
    ts = [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    for layer in wiring.layers:
        ts = multitask_layer_t(ts, layer)
    return [t.data for t in ts]


# -- enhancement subtask ---------------------------------------------------------


def enhance_pair_t(xa: Tensor, xb: Tensor, w: EnhanceWeights) -> tuple[Tensor, Tensor]:
    x = ad.concat_channels([xa, xb])
    e1 = ad.relu(ad.conv2d(x, w.enc[0].kernel, bias=w.enc[0].bias, padding="same"))
    e2 = ad.relu(ad.conv2d(e1, w.enc[1].kernel, bias=w.enc[1].bias, padding="same"))
    e3 = ad.relu(ad.conv2d(e2, w.enc[2].kernel, bias=w.enc[2].bias, padding="same"))
    d1 = ad.relu(ad.conv2d(ad.concat_channels([e1, e2, e3]),
                           w.dec[0].kernel, bias=w.dec[0].bias, padding="same"))
    d2 = ad.relu(ad.conv2d(ad.concat_channels([d1, e1, e2, e3]),
                           w.dec[1].kernel, bias=w.dec[1].bias, padding="same"))
    d3 = ad.relu(ad.conv2d(ad.concat_channels([d2, e1, e2, e3]),
                           w.dec[2].kernel, bias=w.dec[2].bias, padding="same"))
    recon = ad.clamp01(ad.sigmoid(ad.conv2d(d3, w.out.kernel, bias=w.out.bias, padding="same")))
    return ad.reshape(recon, recon.data.shape[-2:]), d3


def enhance(image, model: ModelGraph) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct a single image through the autoencoder; returns the
    [0,1]-clamped reconstruction and the pre-output decoder features."""
    if model.enhance is None:
        raise ModelError("model has no enhancement subnet")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected 2-D image, got shape {img.shape}")
    t = Tensor(img[None])
    recon, feats = enhance_pair_t(t, t, model.enhance)
    return recon.data, feats.data


# -- attention-gated fusion -------------------------------------------------------


def _branch_features_t(img: Tensor, net: bb.BackboneWeights) -> Tensor:
    stages = bb.extract_pyramid_t(img, net)
    lo, hi = bb.fuse_local_global_t(stages, net)
    return ad.concat_channels([lo, hi])


def fusion_head_t(pa_in: Tensor, pb_in: Tensor, pe_in: Tensor, w: FusionHeadWeights) -> Tensor:
    pa = bb.msrb_t(bb.msrb_t(pa_in, w.msrb_ab[0]), w.msrb_ab[1])
    pb = bb.msrb_t(bb.msrb_t(pb_in, w.msrb_ab[0]), w.msrb_ab[1])
    pe = bb.msrb_t(bb.msrb_t(pe_in, w.msrb_en[0]), w.msrb_en[1])
    merged = att.channel_attention_t(ad.concat_channels([pa, pb, pe]), w.cam)
    h = ad.relu(ad.conv2d(merged, w.merge.kernel, bias=w.merge.bias, padding="same"))
    o = ad.sigmoid(ad.conv2d(h, w.out.kernel, bias=w.out.bias, padding="same"))
    return ad.clamp01(ad.reshape(o, o.data.shape[-2:]))


def fuse_t(a_t: Tensor, b_t: Tensor, model: ModelGraph,
           saliency: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Graph form of the fusion forward pass. Returns (fused, saliency,
    gated enhancement features)."""
    if model.attention is None or model.enhance is None or model.fusion is None:
        raise ModelError("model is missing a required subnet")
    fs = saliency if saliency is not None else att.detect_attention_t(a_t, b_t, model)
    fs3 = ad.reshape(fs, (1,) + fs.data.shape[-2:])
    ga = ad.mul(fs3, a_t)
    gb = ad.mul(fs3, b_t)
    _, efeat = enhance_pair_t(ga, gb, model.enhance)
    ge = ad.mul(fs3, efeat)
    pa_in = _branch_features_t(ga, model.backbone)
    pb_in = _branch_features_t(gb, model.backbone_for_b())
    fused = fusion_head_t(pa_in, pb_in, ge, model.fusion)
    return fused, ad.reshape(fs, fs.data.shape[-2:]), ge


def fuse(image_a, image_b, model: ModelGraph, saliency=None) -> FusionOutput:
    """Attention-gated fusion of two aligned images.

    `saliency` overrides the detected attention map (useful for ablations:
    an all-ones map disables gating, an all-zeros map blanks every branch).
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D images, got shape {a.shape}")
    sal_t = None
    if saliency is not None:
        sal = np.asarray(saliency, dtype=np.float64)
        if sal.shape != a.shape:
            raise ShapeError(f"saliency shape {sal.shape} != image shape {a.shape}")
        sal_t = Tensor(sal)
    fused, fs, ge = fuse_t(Tensor(a[None]), Tensor(b[None]), model, saliency=sal_t)
    return FusionOutput(fused=fused.data, saliency=fs.data, enhanced=ge.data)


# -- model container --------------------------------------------------------------


def save_model(model: ModelGraph, path: str) -> None:
    """Write the versioned binary container: header, then named float32
    tensors sorted by name. Loading and re-saving is byte-identical."""
    params = model.named_parameters()
    names = sorted(params)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<Iq", FORMAT_VERSION, model.seed)
    blob += struct.pack("<I", len(bb.STAGE_CHANNELS))
    blob += struct.pack(f"<{len(bb.STAGE_CHANNELS)}I", *bb.STAGE_CHANNELS)
    blob += struct.pack("<B", att.CRITERION_MODES.index(model.attention.mode))
    freeze_bits = sum(1 << i for i, f in enumerate(FAMILIES) if model.freeze.get(f, False))
    trained_bits = sum(1 << i for i, p in enumerate(PHASES) if p in model.trained_phases)
    blob += struct.pack("<BBB", freeze_bits, trained_bits, 1 if model.backbone_b is not None else 0)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = params[name]
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw)) + raw
        blob += struct.pack("<B", 0)  # dtype tag 0: little-endian float32
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_model(path: str) -> ModelGraph:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ModelError(f"cannot read model file {path}: {exc}") from exc
    try:
        return _parse_model(data)
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        raise ModelError(f"corrupt model file {path}: {exc}") from exc


def _parse_model(data: bytes) -> ModelGraph:
    if data[:4] != MAGIC:
        raise ModelError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4
    version, seed = struct.unpack_from("<Iq", data, pos)
    pos += 12
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported container version {version}")
    (n_stages,) = struct.unpack_from("<I", data, pos)
    pos += 4
    schedule = struct.unpack_from(f"<{n_stages}I", data, pos)
    pos += 4 * n_stages
    if schedule != bb.STAGE_CHANNELS:
        raise ModelError(f"stage schedule {schedule} unsupported, expected {bb.STAGE_CHANNELS}")
    mode_idx, freeze_bits, trained_bits, has_b = struct.unpack_from("<BBBB", data, pos)
    pos += 4
    if mode_idx >= len(att.CRITERION_MODES):
        raise ModelError(f"unknown criterion mode index {mode_idx}")
    model = init_model(seed, criterion_mode=att.CRITERION_MODES[mode_idx])
    if has_b:
        model.backbone_b = bb.init_backbone(seed + 1)
    model.freeze = {f: bool(freeze_bits >> i & 1) for i, f in enumerate(FAMILIES)}
    model.trained_phases = [p for i, p in enumerate(PHASES) if trained_bits >> i & 1]
    params = model.named_parameters()
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        dtype_tag, ndim = struct.unpack_from("<BI", data, pos)
        pos += 5
        if dtype_tag != 0:
            raise ModelError(f"unknown dtype tag {dtype_tag} for tensor {name}")
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        vals = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        if name not in params:
            raise ModelError(f"unexpected tensor {name!r} in container")
        dst = params[name]
        if dst.shape != vals.shape:
            raise ModelError(f"tensor {name!r} shape {vals.shape} != expected {dst.shape}")
        dst[...] = vals.astype(np.float64)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ModelError(f"container missing tensors: {sorted(missing)[:4]} ...")
    return model
