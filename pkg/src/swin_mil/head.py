"""Side-output decoders, fixed-weight fusion, generalized-mean MIL pooling
and the deep-supervision loss stack."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DomainError, ShapeError
from .tensor import Tensor

DEFAULT_FUSION_WEIGHTS = (0.3, 0.4, 0.3)


def default_fusion_weights(num_stages: int) -> tuple[float, ...]:
    """0.3/0.4/0.3 for three stages, uniform weights otherwise."""
    if num_stages == 3:
        return DEFAULT_FUSION_WEIGHTS
    return tuple([1.0 / num_stages] * num_stages)


@dataclass(frozen=True)
class HeadConfig:
    r: float = 4.0
    fusion_weights: tuple[float, ...] = DEFAULT_FUSION_WEIGHTS
    clamp_eps: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "fusion_weights", tuple(float(w) for w in self.fusion_weights))
        check_r(self.r)
        check_fusion_weights(self.fusion_weights)
        if not 0 < self.clamp_eps < 0.5:
            raise ConfigError(f"clamp_eps must lie in (0, 0.5), got {self.clamp_eps}")


def check_r(r: float) -> None:
    if not np.isfinite(r) or r < 1:
        raise ConfigError(f"generalized-mean exponent r must be >= 1, got {r}")


def check_fusion_weights(weights: Sequence[float]) -> None:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ConfigError(f"fusion weights must be a non-empty list, got {weights!r}")
    if np.any(w < 0):
        raise ConfigError(f"fusion weights must be nonnegative, got {tuple(weights)}")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"fusion weights must sum to 1, got {tuple(weights)} (sum {w.sum()!r})")


@dataclass
class SideOutputs:
    """Per-stage probability maps ``[B, H, W]`` plus their fused map."""

    per_stage: list[Tensor] = field(default_factory=list)
    fused: Tensor | None = None

    def select(self, side: str | int) -> Tensor:
        """``"fuse"`` or a 1-based stage number."""
        if side in ("fuse", "fused"):
            return self.fused
        idx = int(side)
        if not 1 <= idx <= len(self.per_stage):
            raise ValueError(f"side must be 'fuse' or 1..{len(self.per_stage)}, got {side!r}")
        return self.per_stage[idx - 1]


def side_output(feat: Tensor, w: Tensor, b: Tensor, height: int, width: int) -> Tensor:
    """Squeeze channels to one, upsample to ``height x width``, sigmoid.

    ``feat`` is ``[..., h, w, c]``; returns ``[..., height, width]``.
    """
    if w.shape[-1] != 1:
        raise ShapeError(f"side-output weight must map to one channel, got {w.shape}")
    logits = T.conv1x1(feat, w, b)
    up = T.bilinear_upsample(logits, height, width)
    prob = T.sigmoid(up)
    return T.reshape(prob, prob.shape[:-1])


def fuse(maps: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Pixelwise fixed convex combination of side-output maps."""
    check_fusion_weights(weights)
    if len(maps) != len(weights):
        raise ConfigError(f"{len(maps)} maps but {len(weights)} fusion weights")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"side-output shapes differ: {shape} vs {m.shape}")
    out = T.scale(maps[0], weights[0])
    for m, wt in zip(maps[1:], weights[1:]):
        out = T.add(out, T.scale(m, wt))
    return out


def gm_pool(prob_map: Tensor, r: float = 4.0, eps: float = 1e-7) -> Tensor:
    """Generalized-mean bag score over the last two (pixel) axes.

    ``((1/|X|) * sum(p**r)) ** (1/r)`` on values clamped to ``[eps, 1]``.
    Returns one score per leading index.
    """
    check_r(r)
    p = T.clamp(prob_map, eps, 1.0)
    return T.power(T.mean(T.power(p, r), axis=(-2, -1)), 1.0 / r)


def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise DomainError(f"bag labels must be 0 or 1, got {np.unique(y).tolist()}")
    return y


def mil_loss(score: Tensor, labels, eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy of bag scores, summed over the batch.

    The log argument (the score for positives, one minus the score for
    negatives) is clamped to ``[eps, 1]``.
    """
    y = _check_labels(labels).astype(score.dtype)
    if y.shape != score.shape:
        y = np.broadcast_to(y, score.shape)
    picked = T.add(T.mul(score, 2 * y - 1), 1 - y)
    return T.neg(T.tensor_sum(T.log(T.clamp(picked, eps, 1.0))))


def total_loss(side_scores: Sequence[Tensor], fused_score: Tensor, labels, eps: float = 1e-7) -> tuple[Tensor, list[Tensor]]:
    """Sum of every per-stage MIL loss and the fusion loss, unweighted.

    Returns ``(total, [L_1, ..., L_T, L_fuse])``.
    """
    parts = [mil_loss(s, labels, eps) for s in side_scores]
    parts.append(mil_loss(fused_score, labels, eps))
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)
    return total, parts


def predict_mask(fused, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the probability is at least ``threshold``."""
    data = fused.data if isinstance(fused, Tensor) else np.asarray(fused)
    return data >= threshold
