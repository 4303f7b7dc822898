"""Independent reference implementations used by the tests.

Nothing here imports the package's own kernels; each oracle is written
from the defining formula with explicit Python loops or plain numpy.
"""

from __future__ import annotations

import math

import numpy as np


def central_difference(f, arr: np.ndarray, index, step: float = 1e-5) -> float:
    """d f / d arr[index] by a symmetric difference; ``arr`` is restored."""
    old = arr[index]
    arr[index] = old + step
    hi = f()
    arr[index] = old - step
    lo = f()
    arr[index] = old
    return (hi - lo) / (2 * step)


def gm_scalar(values, r: float, eps: float = 1e-7) -> float:
    vals = [min(max(float(v), eps), 1.0) for v in np.ravel(values)]
    return (sum(v**r for v in vals) / len(vals)) ** (1.0 / r)


def bce_scalar(score: float, label: int, eps: float = 1e-7) -> float:
    p = score if label == 1 else 1.0 - score
    return -math.log(min(max(p, eps), 1.0))


def hausdorff_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    pa = [(i, j) for i, j in zip(*np.nonzero(a))]
    pb = [(i, j) for i, j in zip(*np.nonzero(b))]
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return math.nan

    def directed(src, dst):
        worst = 0.0
        for y0, x0 in src:
            best = min((y0 - y1) ** 2 + (x0 - x1) ** 2 for y1, x1 in dst)
            worst = max(worst, best)
        return worst

    return math.sqrt(max(directed(pa, pb), directed(pb, pa)))


def dice_count(pred: np.ndarray, gt: np.ndarray) -> float:
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        tp += bool(p) and bool(g)
        fp += bool(p) and not g
        fn += (not p) and bool(g)
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def layer_norm_ref(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def attention_loop(x, qkv_w, qkv_b, proj_w, proj_b, heads, window, shift, rpb=None):
    """Shifted-window attention on one ``[h, w, C]`` grid, token by token.

    Token ``i`` attends to token ``j`` iff both fall in the same window of
    the grid rolled by ``(-shift, -shift)`` and the roll did not wrap the
    pair apart, i.e. their offset is the same before and after the roll.
    Masked pairs are dropped outright instead of receiving a large negative
    logit.
    """
    h, w, c = x.shape
    d = c // heads
    tw = 0 if rpb is None else (int(round(math.sqrt(rpb.shape[0]))) + 1) // 2
    q = x @ qkv_w[:, :c] + qkv_b[:c]
    k = x @ qkv_w[:, c : 2 * c] + qkv_b[c : 2 * c]
    v = x @ qkv_w[:, 2 * c :] + qkv_b[2 * c :]
    out = np.zeros_like(x)
    coords = [(y, z) for y in range(h) for z in range(w)]
    for yi, xi in coords:
        si = ((yi - shift) % h, (xi - shift) % w)
        heads_out = []
        for hd in range(heads):
            sl = slice(hd * d, (hd + 1) * d)
            logits, vals = [], []
            for yj, xj in coords:
                sj = ((yj - shift) % h, (xj - shift) % w)
                if si[0] // window != sj[0] // window or si[1] // window != sj[1] // window:
                    continue
                if (yj - yi, xj - xi) != (sj[0] - si[0], sj[1] - si[1]):
                    continue
                logit = float(q[yi, xi, sl] @ k[yj, xj, sl]) / math.sqrt(d)
                if rpb is not None:
                    dy, dx = si[0] - sj[0], si[1] - sj[1]
                    logit += rpb[(dy + tw - 1) * (2 * tw - 1) + (dx + tw - 1), hd]
                logits.append(logit)
                vals.append(v[yj, xj, sl])
            logits = np.asarray(logits)
            wts = np.exp(logits - logits.max())
            wts /= wts.sum()
            heads_out.append(sum(wt * val for wt, val in zip(wts, vals)))
        out[yi, xi] = np.concatenate(heads_out) @ proj_w + proj_b
    return out


def bilinear_scalar(src: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-D array, one pixel at a time."""
    h, w = src.shape
    out = np.zeros((height, width))
    for i in range(height):
        for j in range(width):
            y = min(max((i + 0.5) * h / height - 0.5, 0.0), h - 1)
            x = min(max((j + 0.5) * w / width - 0.5, 0.0), w - 1)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                src[y0, x0] * (1 - fy) * (1 - fx)
                + src[y1, x0] * fy * (1 - fx)
                + src[y0, x1] * (1 - fy) * fx
                + src[y1, x1] * fy * fx
            )
    return out
