"""Structural-similarity, feature-distance, and edge losses, plus their sum.

The structural index is the literal three-factor form (luminance, contrast,
structure with its own stabilizer) computed over valid positions of a
Gaussian window. Every public loss returns both the scalar and its gradient
with respect to the predicted image.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .autodiff import Tensor
from .errors import ShapeError


@dataclass
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    c3: float = 0.03 ** 2 / 2

    def __post_init__(self):
        if self.window_size % 2 == 0 or self.window_size < 1:
            raise ValueError(f"window size must be odd, got {self.window_size}")
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ValueError("stabilization constants must be positive")


@dataclass
class LossValue:
    value: float
    gradient: np.ndarray


@lru_cache(maxsize=16)
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _win_conv(x: Tensor, window: np.ndarray) -> Tensor:
    lifted = ad.reshape(x, (1,) + x.data.shape)
    out = ad.conv2d(lifted, window[None, None], padding="valid")
    return ad.reshape(out, out.data.shape[-2:])


def ssim_index_t(x: Tensor, y: Tensor, p: SsimParams) -> Tensor:
    if x.data.shape != y.data.shape:
        raise ShapeError(f"image shapes differ: {x.data.shape} vs {y.data.shape}")
    if min(x.data.shape) < p.window_size:
        raise ShapeError(
            f"images of shape {x.data.shape} smaller than the {p.window_size}-tap window"
        )
    w = gaussian_window(p.window_size, p.sigma)
    mu_x = _win_conv(x, w)
    mu_y = _win_conv(y, w)
    m_xx = _win_conv(ad.mul(x, x), w)
    m_yy = _win_conv(ad.mul(y, y), w)
    m_xy = _win_conv(ad.mul(x, y), w)
    var_x = ad.sub(m_xx, ad.mul(mu_x, mu_x))
    var_y = ad.sub(m_yy, ad.mul(mu_y, mu_y))
    cov = ad.sub(m_xy, ad.mul(mu_x, mu_y))
    sig = ad.sigma_product(var_x, var_y)

    lum = ad.div(ad.add(ad.mul(ad.mul(mu_x, mu_y), 2.0), p.c1),
                 ad.add(ad.add(ad.mul(mu_x, mu_x), ad.mul(mu_y, mu_y)), p.c1))
    con = ad.div(ad.add(ad.mul(sig, 2.0), p.c2),
                 ad.add(ad.add(var_x, var_y), p.c2))
    st = ad.div(ad.add(cov, p.c3), ad.add(sig, p.c3))
    return ad.mean_all(ad.mul(ad.mul(lum, con), st))


def ssim_index(x, y, p: SsimParams | None = None) -> float:
    """Mean windowed luminance * contrast * structure similarity in [-1, 1]."""
    p = p or SsimParams()
    return ssim_index_t(Tensor(np.asarray(x, dtype=np.float64)),
                        Tensor(np.asarray(y, dtype=np.float64)), p).item()


def ssim_loss_t(predict: Tensor, reference: Tensor, p: SsimParams) -> Tensor:
    return ad.sub(1.0, ssim_index_t(predict, reference, p))


def _eval_loss(build, predict: np.ndarray) -> LossValue:
    pt = Tensor(predict, requires_grad=True)
    out = build(pt)
    if out._parents:
        out.backward()
    grad = pt.grad if pt.grad is not None else np.zeros_like(predict)
    return LossValue(value=float(out.data), gradient=grad)


def ssim_loss(predict, reference, p: SsimParams | None = None) -> LossValue:
    """1 minus the structural index, with gradient w.r.t. the prediction."""
    p = p or SsimParams()
    predict = np.asarray(predict, dtype=np.float64)
    ref = Tensor(np.asarray(reference, dtype=np.float64))
    return _eval_loss(lambda pt: ssim_loss_t(pt, ref, p), predict)


def perceptual_loss_t(predict: Tensor, reference: Tensor, extractor: bb.BackboneWeights,
                      stage: int = 3) -> Tensor:
    if not 1 <= stage <= 5:
        raise ValueError(f"stage must be in 1..5, got {stage}")
    feats = []
    for img in (predict, reference):
        lifted = img if img.data.ndim == 3 else ad.reshape(img, (1,) + img.data.shape)
        feats.append(bb.extract_pyramid_t(lifted, extractor)[stage - 1])
    diff = ad.sub(feats[0], feats[1])
    return ad.mean_all(ad.mul(diff, diff))


def perceptual_loss(predict, reference, extractor: bb.BackboneWeights,
                    stage: int = 3) -> LossValue:
    """Mean squared distance between deep features of the two images."""
    predict = np.asarray(predict, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predict.shape != reference.shape:
        raise ShapeError(f"image shapes differ: {predict.shape} vs {reference.shape}")
    ref = Tensor(reference)
    return _eval_loss(lambda pt: perceptual_loss_t(pt, ref, extractor, stage), predict)


def _laplacian01_t(img: Tensor) -> Tensor:
    """Valid-mode second-difference response mapped affinely from [-4,4] to [0,1]."""
    return ad.mul(ad.add(ad.laplacian2d(img), 4.0), 0.125)


def edge_loss_t(predict: Tensor, reference: Tensor, p: SsimParams) -> Tensor:
    return ssim_loss_t(_laplacian01_t(predict), _laplacian01_t(reference), p)


def edge_loss(predict, reference, p: SsimParams | None = None) -> LossValue:
    """Structural loss on second-derivative (edge) responses of both images."""
    p = p or SsimParams()
    predict = np.asarray(predict, dtype=np.float64)
    ref = Tensor(np.asarray(reference, dtype=np.float64))
    return _eval_loss(lambda pt: edge_loss_t(pt, ref, p), predict)


def fusion_loss_t(predict: Tensor, references, weights=(1.0, 1.0, 1.0),
                  p: SsimParams | None = None, extractor: bb.BackboneWeights | None = None,
                  stage: int = 3) -> tuple[Tensor, dict[str, float]]:
    """Weighted total of the three losses, each averaged over the references.

    Returns the scalar graph node plus the raw (unweighted) component means.
    Components with zero weight are skipped and reported as 0.
    """
    p = p or SsimParams()
    refs = [r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float64))
            for r in references]
    if not refs:
        raise ValueError("at least one reference image is required")
    w_ssim, w_perc, w_edge = (float(v) for v in weights)
    if w_perc != 0.0 and extractor is None:
        raise ValueError("perceptual term requires a feature extractor")
    n = float(len(refs))
    comps = {"ssim": 0.0, "perceptual": 0.0, "edge": 0.0}
    terms = []
    for name, w_term, fn in (
        ("ssim", w_ssim, lambda r: ssim_loss_t(predict, r, p)),
        ("perceptual", w_perc, lambda r: perceptual_loss_t(predict, r, extractor, stage)),
        ("edge", w_edge, lambda r: edge_loss_t(predict, r, p)),
    ):
        if w_term == 0.0:
            continue
        mean_t = ad.mul(_sum_tensors([fn(r) for r in refs]), 1.0 / n)
        comps[name] = float(mean_t.data)
        terms.append(ad.mul(mean_t, w_term))
    total = _sum_tensors(terms) if terms else Tensor(np.asarray(0.0))
    return total, comps


def _sum_tensors(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


def fusion_loss(predict, references, weights=(1.0, 1.0, 1.0),
                p: SsimParams | None = None, extractor: bb.BackboneWeights | None = None,
                stage: int = 3) -> LossValue:
    """Total training loss of a fused image against its reference set."""
    predict = np.asarray(predict, dtype=np.float64)

    def build(pt):
        total, _ = fusion_loss_t(pt, references, weights, p, extractor, stage)
        return total

    return _eval_loss(build, predict)
