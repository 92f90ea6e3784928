"""Staged multi-task training, gradient verification, and synthetic data.

Each phase trains exactly one parameter family (attention subtask, then the
enhancement subtask, then the fusion head with both subtasks fixed). All
accumulation happens in a fixed order, so identical configs and data give
bitwise-identical models.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import backbone as bb
from . import imgcore
from . import losses
from . import network as net
from .autodiff import Tensor
from .errors import NumericError, StateError
from .params import lift

PHASE_FAMILY = {"attention": "attention", "enhance": "enhance", "main": "fusion"}


@dataclass
class TrainConfig:
    phase: str
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 4
    steps: int = 200
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_weights: tuple = (1.0, 1.0, 1.0)
    perceptual_stage: int = 3
    ssim: losses.SsimParams = field(default_factory=losses.SsimParams)

    def __post_init__(self):
        if self.phase not in net.PHASES:
            raise ValueError(f"phase must be one of {net.PHASES}, got {self.phase!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass
class SyntheticPair:
    modality_a: np.ndarray  # textured scene, targets at low contrast
    modality_b: np.ndarray  # blurred noisy scene, targets at high contrast
    truth_mask: np.ndarray  # binary {0,1}


@dataclass
class CurvePoint:
    iteration: int
    l_ssim: float
    l_perceptual: float
    l_edge: float
    l_f: float


# -- synthetic data ---------------------------------------------------------------


def _render_targets(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    margin = size // 5
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(margin, size - margin, size=2)
        ry, rx = rng.uniform(0.11 * size, 0.22 * size, size=2)
        theta = rng.uniform(0.0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        mask[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = 1.0
    return mask


def _texture(rng: np.random.Generator, size: int, n_waves: int, fmin: float, fmax: float,
             amp: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(fmin, fmax, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += rng.uniform(0.4, 1.0) * amp * np.sin(2.0 * np.pi * (fx * xx + fy * yy) / size + phase)
    return out


def gen_synthetic(seed: int, count: int, size: int = 64) -> list[SyntheticPair]:
    """Deterministic cross-modal pairs: pair i depends only on (seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if size % 8:
        raise ValueError("size must be divisible by 8")
    pairs = []
    for index in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        mask = _render_targets(rng, size)
        a = 0.45 + _texture(rng, size, 4, 4.0, 12.0, 0.10)
        a += rng.normal(0.0, 0.02, size=(size, size))
        a += 0.10 * mask
        a = np.clip(a, 0.0, 1.0)
        b = 0.22 + _texture(rng, size, 2, 1.0, 2.5, 0.06)
        b = np.where(mask > 0, 0.85, b)
        b = imgcore.blur5(np.clip(b, 0.0, 1.0))
        b += rng.normal(0.0, 0.02, size=(size, size))
        b = np.clip(b, 0.0, 1.0)
        pairs.append(SyntheticPair(modality_a=a, modality_b=b, truth_mask=mask))
    return pairs


# -- optimizers -------------------------------------------------------------------


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name in sorted(arrays):
            arrays[name] -= self.lr * grads[name]


class _Adam:
    def __init__(self, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name in sorted(arrays):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            arrays[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return _Sgd(config.learning_rate)
    return _Adam(config.learning_rate, config.beta1, config.beta2, config.eps)


# -- phase losses -----------------------------------------------------------------


def _lift_model(model: net.ModelGraph, trainable: set[str]):
    tensors: dict[str, Tensor] = {}

    def wrap(name, arr):
        t = Tensor(arr, requires_grad=net.family_of(name) in trainable)
        if t.requires_grad:
            tensors[name] = t
        return t

    view = lift(model, wrap)
    return view, tensors


def _attention_weights(config: TrainConfig) -> tuple:
    w = config.loss_weights
    return (w[0], 0.0, w[2])


def phase_loss_t(view: net.ModelGraph, phase: str, sample: SyntheticPair,
                 config: TrainConfig):
    """Full-graph loss for one sample (no cached prefixes); used by grad_check
    and by the enhance phase. Returns (scalar tensor, raw components).

    The perceptual extractor is the view's own backbone, so when that family
    is trainable the feature distance is differentiated through it too.
    """
    p = config.ssim
    if phase == "attention":
        a_t = Tensor(sample.modality_a[None])
        b_t = Tensor(sample.modality_b[None])
        pred = att.detect_attention_t(a_t, b_t, view)
        return losses.fusion_loss_t(pred, [sample.truth_mask], _attention_weights(config), p)
    if phase == "enhance":
        x = sample.modality_a
        t = Tensor(x[None])
        recon, _ = net.enhance_pair_t(t, t, view.enhance)
        return losses.fusion_loss_t(recon, [x], config.loss_weights, p,
                                    extractor=view.backbone, stage=config.perceptual_stage)
    fused, _, _ = net.fuse_t(Tensor(sample.modality_a[None]), Tensor(sample.modality_b[None]), view)
    return losses.fusion_loss_t(fused, [sample.modality_a, sample.modality_b],
                                config.loss_weights, p,
                                extractor=view.backbone, stage=config.perceptual_stage)


def _branch_features_np(img: np.ndarray, weights: bb.BackboneWeights) -> np.ndarray:
    stages = bb.extract_pyramid_t(Tensor(img[None]), weights)
    lo, hi = bb.fuse_local_global_t(stages, weights)
    return np.concatenate([lo.data, hi.data], axis=0)


def _prepare_samples(model: net.ModelGraph, data: list[SyntheticPair], phase: str):
    """Evaluate the frozen prefix of each sample once; training steps then
    rebuild only the trainable tail of the graph."""
    if phase == "attention":
        out = []
        for s in data:
            fa = _branch_features_np(s.modality_a, model.backbone)
            fb = _branch_features_np(s.modality_b, model.backbone_for_b())
            out.append((fa, fb, s))
        return out
    if phase == "enhance":
        images = []
        for s in data:
            images.append(s.modality_a)
            images.append(s.modality_b)
        return images
    out = []
    for s in data:
        fs = att.detect_attention(s.modality_a, s.modality_b, model)
        ga = fs[None] * s.modality_a[None]
        gb = fs[None] * s.modality_b[None]
        _, efeat = net.enhance_pair_t(Tensor(ga), Tensor(gb), model.enhance)
        ge = fs[None] * efeat.data
        pa = _branch_features_np(ga[0], model.backbone)
        pb = _branch_features_np(gb[0], model.backbone_for_b())
        out.append((pa, pb, ge, s))
    return out


def _cached_loss_t(view: net.ModelGraph, phase: str, prepared, config: TrainConfig):
    p = config.ssim
    if phase == "attention":
        fa, fb, s = prepared
        pred = att.detect_from_features_t(Tensor(fa), Tensor(fb), view.attention)
        return losses.fusion_loss_t(pred, [s.truth_mask], _attention_weights(config), p)
    if phase == "enhance":
        x = prepared
        t = Tensor(x[None])
        recon, _ = net.enhance_pair_t(t, t, view.enhance)
        return losses.fusion_loss_t(recon, [x], config.loss_weights, p,
                                    extractor=view.backbone, stage=config.perceptual_stage)
    pa, pb, ge, s = prepared
    fused = net.fusion_head_t(Tensor(pa), Tensor(pb), Tensor(ge), view.fusion)
    return losses.fusion_loss_t(fused, [s.modality_a, s.modality_b], config.loss_weights, p,
                                extractor=view.backbone, stage=config.perceptual_stage)


# -- the training loop -------------------------------------------------------------


def train_phase(model: net.ModelGraph, data: list[SyntheticPair],
                config: TrainConfig) -> tuple[net.ModelGraph, list[CurvePoint]]:
    """Run one phase; returns the updated model and the per-step loss record.

    Exactly the phase's own family receives updates. Completing a subtask
    phase marks that family fixed; the main phase requires both subtasks
    trained first.
    """
    if config.phase == "main":
        done = set(model.trained_phases)
        if not {"attention", "enhance"} <= done:
            raise StateError(
                f"main phase requires trained attention and enhance subtasks, have {sorted(done)}"
            )
    if not data:
        raise ValueError("training data is empty")
    model = copy.deepcopy(model)
    family = PHASE_FAMILY[config.phase]
    curve: list[CurvePoint] = []
    if config.steps == 0:
        return model, curve

    prepared = _prepare_samples(model, data, config.phase)
    view, tensors = _lift_model(model, {family})
    arrays = {name: t.data for name, t in tensors.items()}
    opt = _make_optimizer(config)
    nb = float(config.batch_size)

    for step in range(config.steps):
        for t in tensors.values():
            t.grad = None
        acc = {"ssim": 0.0, "perceptual": 0.0, "edge": 0.0}
        total_acc = 0.0
        for k in range(config.batch_size):
            idx = (step * config.batch_size + k) % len(prepared)
            total_t, comps = _cached_loss_t(view, config.phase, prepared[idx], config)
            value = float(total_t.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}, sample {idx}")
            total_t.backward()
            total_acc += value
            for key in acc:
                acc[key] += comps[key]
        grads = {
            name: (t.grad / nb if t.grad is not None else np.zeros_like(t.data))
            for name, t in tensors.items()
        }
        opt.step(arrays, grads)
        curve.append(CurvePoint(step, acc["ssim"] / nb, acc["perceptual"] / nb,
                                acc["edge"] / nb, total_acc / nb))

    model.freeze[family] = config.phase in ("attention", "enhance")
    if config.phase == "main":
        model.freeze["attention"] = True
        model.freeze["enhance"] = True
    if config.phase not in model.trained_phases:
        model.trained_phases.append(config.phase)
    return model, curve


# -- gradient verification -----------------------------------------------------------


def central_difference(forward, flat: np.ndarray, idx: int, eps: float) -> float:
    orig = flat[idx]
    flat[idx] = orig + eps
    f_plus = forward()
    flat[idx] = orig - eps
    f_minus = forward()
    flat[idx] = orig
    return (f_plus - f_minus) / (2.0 * eps)


def rel_err(a: float, b: float, floor: float = 1e-2) -> float:
    """|a - b| scaled by the larger magnitude, floored (losses are O(1), so
    the floor keeps difference noise from dominating genuinely tiny values)."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(model: net.ModelGraph, loss: str, sample: SyntheticPair, eps: float = 1e-3,
               families=None, max_per_tensor: int = 2, check_seed: int = 0,
               config: TrainConfig | None = None, smooth_tol: float = 5e-5,
               min_coverage: float = 0.5) -> float:
    """Worst relative disagreement between analytic gradients and central
    finite differences over a random subset of each parameter tensor.

    A probe is only compared where the difference quotient is trustworthy:
    central differences at steps eps and eps/2 must agree to `smooth_tol`,
    which rejects coordinates whose stencil straddles a ReLU/max kink. The
    filter never looks at the analytic value, so it cannot hide a wrong
    backward. Frozen families are excluded and their analytic gradient is
    exactly zero. Raises NumericError if fewer than `min_coverage` of the
    probes were smooth enough to compare.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if loss not in net.PHASES:
        raise ValueError(f"loss must name a phase {net.PHASES}, got {loss!r}")
    config = config or TrainConfig(phase=loss, seed=0)
    model = copy.deepcopy(model)
    trainable = set(families) if families is not None else set(net.FAMILIES)
    trainable = {f for f in trainable if not model.freeze.get(f, False)}

    view, tensors = _lift_model(model, trainable)
    total_t, _ = phase_loss_t(view, loss, sample, config)
    if not np.isfinite(float(total_t.data)):
        raise NumericError("non-finite loss in grad_check")
    if total_t._parents:
        total_t.backward()
    analytic = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }

    def forward() -> float:
        v, _ = phase_loss_t(view, loss, sample, config)
        value = float(v.data)
        if not np.isfinite(value):
            raise NumericError("non-finite loss in finite-difference probe")
        return value

    rng = np.random.default_rng(np.random.SeedSequence([check_seed]))
    worst = 0.0
    compared = skipped = 0
    for name in sorted(tensors):
        arr = tensors[name].data
        flat = arr.reshape(-1)
        k = min(max_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        gflat = analytic[name].reshape(-1)
        for idx in picks:
            n1 = central_difference(forward, flat, idx, eps)
            n2 = central_difference(forward, flat, idx, eps / 2.0)
            if rel_err(n1, n2) > smooth_tol:
                skipped += 1
                continue
            compared += 1
            worst = max(worst, rel_err(float(gflat[idx]), n1))
    total = compared + skipped
    if total and compared < min_coverage * total:
        raise NumericError(
            f"loss too non-smooth for differencing: {compared}/{total} probes usable"
        )
    return worst


# -- dataset and curve I/O -------------------------------------------------------------


def write_curve(path: str, curve: list[CurvePoint]) -> None:
    import os

    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("iteration,l_ssim,l_perceptual,l_edge,l_f\n")
        for row in curve:
            fh.write(f"{row.iteration},{row.l_ssim!r},{row.l_perceptual!r},"
                     f"{row.l_edge!r},{row.l_f!r}\n")
    os.replace(tmp, path)
