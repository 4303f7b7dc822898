"""F1 (dice), background F1 for negative images, Hausdorff distance, and
the evaluation report."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

REPORT_KEYS = ("f1_pos", "hd_pos", "hd_pos_undefined_count", "f1_neg", "runtime_per_image_s")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def f1_score(pred, gt) -> float:
    """Dice ``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def f1_negative(pred) -> float:
    """Dice with background as the target class, for an all-background truth:
    ``2 TN / (2 TN + FP)``."""
    p = np.asarray(pred, dtype=bool)
    fp = int(p.sum())
    tn = p.size - fp
    if tn == 0 and fp == 0:
        return 1.0
    return 2.0 * tn / (2.0 * tn + fp)


def _directed(src: np.ndarray, dst: np.ndarray) -> float:
    # exact Euclidean distance from every pixel to the nearest dst pixel
    dist = distance_transform_edt(~dst)
    return float(dist[src].max())


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between foreground pixel sets.

    Pixel centres are integer (row, col) coordinates. Returns 0.0 when both
    sets are empty and ``nan`` (undefined) when exactly one is.
    """
    p, g = _pair(pred, gt)
    has_p, has_g = bool(p.any()), bool(g.any())
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return math.nan
    return max(_directed(p, g), _directed(g, p))


@dataclass
class ImageResult:
    name: str
    label: int
    f1: float
    hd: float | None = None


@dataclass
class EvalReport:
    """Dataset-level metrics; ``None`` marks a column with no images."""

    f1_pos: float | None
    hd_pos: float | None
    hd_pos_undefined_count: int
    f1_neg: float | None
    runtime_per_image_s: float
    per_image: list[ImageResult] = field(default_factory=list)
    side: str = "fuse"
    threshold: float = 0.5

    def metrics(self) -> dict[str, object]:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_text(self) -> str:
        """Human-readable summary followed by a ``[metrics]`` key=value block."""
        n_pos = sum(1 for r in self.per_image if r.label == 1)
        n_neg = len(self.per_image) - n_pos
        lines = [
            "# evaluation report",
            f"side: {self.side}",
            f"threshold: {self.threshold!r}",
            f"images: {len(self.per_image)} (positive {n_pos}, negative {n_neg})",
            "",
            "name\tlabel\tf1\thd",
        ]
        for r in self.per_image:
            hd = "-" if r.hd is None else ("undefined" if math.isnan(r.hd) else f"{r.hd:.6g}")
            lines.append(f"{r.name}\t{r.label}\t{r.f1:.6f}\t{hd}")
        lines += ["", "[metrics]"]
        for k, v in self.metrics().items():
            lines.append(f"{k}={_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_report_metrics(text: str) -> dict[str, str]:
    """Read back the key=value block of :meth:`EvalReport.to_text`."""
    out: dict[str, str] = {}
    in_block = False
    for line in text.splitlines():
        if line.strip() == "[metrics]":
            in_block = True
            continue
        if in_block and "=" in line:
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def aggregate(results: Sequence[ImageResult], runtime_per_image_s: float, **kw) -> EvalReport:
    pos = [r for r in results if r.label == 1]
    neg = [r for r in results if r.label == 0]
    hds = [r.hd for r in pos if r.hd is not None and not math.isnan(r.hd)]
    return EvalReport(
        f1_pos=float(np.mean([r.f1 for r in pos])) if pos else None,
        hd_pos=float(np.mean(hds)) if hds else None,
        hd_pos_undefined_count=len(pos) - len(hds),
        f1_neg=float(np.mean([r.f1 for r in neg])) if neg else None,
        runtime_per_image_s=runtime_per_image_s,
        per_image=list(results),
        **kw,
    )


def evaluate(model, bags, threshold: float = 0.5, side: str | int = "fuse", batch_size: int = 8) -> EvalReport:
    """Score binarized probability maps of ``model`` against bag masks.

    Positives contribute F1 and Hausdorff distance; negatives contribute
    background F1. Each metric is averaged over images.
    """
    if len(bags) == 0:
        return aggregate([], 0.0, side=str(side), threshold=threshold)
    images = np.stack([b.image for b in bags])
    start = time.perf_counter()
    stages, fused, _ = model.predict(images, batch_size=batch_size)
    elapsed = time.perf_counter() - start
    if side in ("fuse", "fused"):
        maps = fused
    else:
        idx = int(side)
        if not 1 <= idx <= len(stages):
            raise ValueError(f"side must be 'fuse' or 1..{len(stages)}, got {side!r}")
        maps = stages[idx - 1]
    results = []
    for bag, prob in zip(bags, maps):
        if bag.gt_mask is None:
            raise ValueError(f"bag {bag.name!r} has no ground-truth mask")
        pred = prob >= threshold
        if bag.label == 1:
            results.append(ImageResult(bag.name, 1, f1_score(pred, bag.gt_mask), hausdorff(pred, bag.gt_mask)))
        else:
            results.append(ImageResult(bag.name, 0, f1_negative(pred)))
    return aggregate(results, elapsed / len(bags), side=str(side), threshold=threshold)
