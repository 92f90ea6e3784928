"""Objective evaluation: structural similarity, mutual information, average
gradient, entropy, plus two classical fusion baselines for comparison rows.

Histogram metrics quantize to 256 levels with the same round-half-up rule
used for 8-bit export, so a metric of a saved-and-reloaded image matches the
in-memory value.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields

import numpy as np

from . import imgcore
from .errors import ShapeError
from .losses import SsimParams, ssim_index


@dataclass
class MetricReport:
    pair: str
    method: str
    ssim_a: float
    ssim_b: float
    mi_a: float
    mi_b: float
    ag: float
    en: float


def avg_gradient(image) -> float:
    """Mean over interior pixels of sqrt((dx^2 + dy^2) / 2), forward differences."""
    img = imgcore.as_image(image)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"image must be at least 2x2, got {img.shape}")
    dx = img[:-1, 1:] - img[:-1, :-1]
    dy = img[1:, :-1] - img[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


def _hist256(image) -> np.ndarray:
    q = imgcore.quantize_u8(image)
    return np.bincount(q.reshape(-1), minlength=256).astype(np.float64)


def _entropy_of(p: np.ndarray) -> float:
    p = p / p.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def entropy(image) -> float:
    """Shannon entropy (bits) of the 256-bin intensity histogram."""
    return _entropy_of(_hist256(image))


def mutual_information(a, b) -> float:
    """H(a) + H(b) - H(a,b) in bits from the joint 256x256 histogram."""
    a = imgcore.as_image(a)
    b = imgcore.as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    qa = imgcore.quantize_u8(a).reshape(-1).astype(np.int64)
    qb = imgcore.quantize_u8(b).reshape(-1).astype(np.int64)
    joint = np.bincount(qa * 256 + qb, minlength=256 * 256).astype(np.float64)
    h_a = _entropy_of(joint.reshape(256, 256).sum(axis=1))
    h_b = _entropy_of(joint.reshape(256, 256).sum(axis=0))
    h_ab = _entropy_of(joint)
    return max(h_a + h_b - h_ab, 0.0)


def ssim_metric(fused, source, p: SsimParams | None = None) -> float:
    return ssim_index(fused, source, p)


def mask_iou(pred_mask, truth_mask) -> float:
    """Intersection over union of two binary masks; empty union counts as 1."""
    p = np.asarray(pred_mask, dtype=bool)
    t = np.asarray(truth_mask, dtype=bool)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


# -- baselines ----------------------------------------------------------------------


def baseline_average(a, b) -> np.ndarray:
    a = imgcore.as_image(a)
    b = imgcore.as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


def _laplacian_pyramid(image, levels: int):
    gauss = imgcore.gaussian_pyramid(image, levels)
    detail = []
    for k in range(levels - 1):
        h, w = gauss[k].shape
        up = imgcore.bilinear_resize(gauss[k + 1][None], h, w)[0]
        detail.append(gauss[k] - up)
    return detail, gauss[-1]


def baseline_lp_fuse(a, b, levels: int = 4) -> np.ndarray:
    """Classic pyramid fusion: per-level max-absolute detail coefficients
    (ties go to the first input), mean top level, then reconstruct and clamp.
    """
    a = imgcore.as_image(a)
    b = imgcore.as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    da, ta = _laplacian_pyramid(a, levels)
    db, tb = _laplacian_pyramid(b, levels)
    top = 0.5 * (ta + tb)
    details = [np.where(np.abs(la) >= np.abs(lb), la, lb) for la, lb in zip(da, db)]
    out = top
    for k in range(levels - 2, -1, -1):
        h, w = details[k].shape
        out = details[k] + imgcore.bilinear_resize(out[None], h, w)[0]
    return np.clip(out, 0.0, 1.0)


# -- reports -------------------------------------------------------------------------


def eval_report(fused, source_a, source_b, pair: str = "", method: str = "",
                p: SsimParams | None = None) -> MetricReport:
    fused = imgcore.as_image(fused)
    a = imgcore.as_image(source_a)
    b = imgcore.as_image(source_b)
    if fused.shape != a.shape or fused.shape != b.shape:
        raise ShapeError("fused and source shapes must match")
    return MetricReport(
        pair=pair,
        method=method,
        ssim_a=ssim_metric(fused, a, p),
        ssim_b=ssim_metric(fused, b, p),
        mi_a=mutual_information(fused, a),
        mi_b=mutual_information(fused, b),
        ag=avg_gradient(fused),
        en=entropy(fused),
    )


CSV_HEADER = "pair,method,ssim_a,ssim_b,mi_a,mi_b,ag,en"
_FLOAT_FIELDS = ("ssim_a", "ssim_b", "mi_a", "mi_b", "ag", "en")


def write_reports_csv(path: str, reports: list[MetricReport]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in reports:
            vals = ",".join(repr(getattr(r, f)) for f in _FLOAT_FIELDS)
            fh.write(f"{r.pair},{r.method},{vals}\n")
    os.replace(tmp, path)


def read_reports_csv(path: str) -> list[MetricReport]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected CSV header in {path}")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 8:
            raise ValueError(f"malformed CSV row: {ln!r}")
        out.append(MetricReport(parts[0], parts[1], *(float(v) for v in parts[2:])))
    return out


def write_reports_json(path: str, reports: list[MetricReport]) -> None:
    records = [{f.name: getattr(r, f.name) for f in fields(MetricReport)} for r in reports]
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
