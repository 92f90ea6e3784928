"""Shared oracles and helpers.

`loop_conv2d` is the brute-force reference convolution used to check the
vectorized kernels: nested Python loops, nothing shared with the library
implementation. `fd_gradient` provides filtered central differences for
gradient tests (probes where the half-step quotient disagrees straddle a
kink and are reported as None).
"""

import numpy as np
import pytest


def loop_conv2d(x, kernels, bias=None, stride=1, padding="same"):
    """Reference cross-correlation via explicit loops. x: (C,H,W),
    kernels: (Co,C,kh,kw)."""
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    c, h, w = x.shape
    co, ci, kh, kw = kernels.shape
    assert ci == c
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        pad_h = max((oh - 1) * stride + kh - h, 0)
        pad_w = max((ow - 1) * stride + kw - w, 0)
        pt, pl = pad_h // 2, pad_w // 2
    else:
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pt = pl = 0
    out = np.zeros((co, oh, ow))
    for o in range(co):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for cc in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            ii = i * stride + di - pt
                            jj = j * stride + dj - pl
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += kernels[o, cc, di, dj] * x[cc, ii, jj]
                out[o, i, j] = acc
        if bias is not None:
            out[o] += bias[o]
    return out


def fd_gradient(forward, array, idx, eps=1e-3, smooth_tol=5e-5):
    """Central difference of scalar `forward()` w.r.t. array.flat[idx].
    Returns None when the eps and eps/2 quotients disagree (non-smooth point,
    unusable for comparison)."""
    flat = array.reshape(-1)

    def quot(e):
        orig = flat[idx]
        flat[idx] = orig + e
        fp = forward()
        flat[idx] = orig - e
        fm = forward()
        flat[idx] = orig
        return (fp - fm) / (2.0 * e)

    n1 = quot(eps)
    n2 = quot(eps / 2.0)
    if abs(n1 - n2) / max(abs(n1), abs(n2), 1e-2) > smooth_tol:
        return None
    return n1


def max_rel_err(analytic, forward, array, rng, n_probes=6, eps=1e-3):
    """Worst filtered relative FD error over `n_probes` random coordinates of
    `array`. `analytic` is the full gradient array for it."""
    flat_g = np.asarray(analytic).reshape(-1)
    worst = 0.0
    compared = 0
    for idx in rng.choice(array.size, size=min(n_probes, array.size), replace=False):
        numeric = fd_gradient(forward, array, idx, eps=eps)
        if numeric is None:
            continue
        compared += 1
        worst = max(worst, abs(flat_g[idx] - numeric) / max(abs(flat_g[idx]), abs(numeric), 1e-2))
    assert compared > 0, "every probe hit a non-smooth point"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
