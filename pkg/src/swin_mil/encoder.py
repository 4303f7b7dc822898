"""Hierarchical shifted-window transformer encoder.

Feature maps are channels-last ``[B, h, w, C]``. Stage 1 embeds 4x4 patches
and runs its blocks; every later stage starts with a 2x2 patch merge.
Blocks within a stage alternate regular and shifted window partitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .tensor import Tensor

# Additive logit for token pairs split by a shifted-window seam.
MASK_VALUE = -1.0e4


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    patch_size: int = 4
    embed_dim: int = 24
    depths: tuple[int, ...] = (2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12)
    window_size: int = 4
    mlp_ratio: float = 4.0
    use_relative_position_bias: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, stage: int) -> int:
        """Channel count of stage ``stage`` (0-based)."""
        return self.embed_dim * 2**stage

    def validate(self) -> None:
        if not 1 <= self.num_stages <= 4:
            raise ConfigError(f"depths must list 1-4 stages, got {self.depths}")
        if len(self.num_heads) != self.num_stages:
            raise ConfigError(f"num_heads {self.num_heads} does not match depths {self.depths}")
        if min(self.depths) < 1:
            raise ConfigError(f"every stage needs at least one block, got depths {self.depths}")
        for t, heads in enumerate(self.num_heads):
            dim = self.stage_dim(t)
            if heads < 1 or dim % heads:
                raise ConfigError(f"stage {t + 1} dim {dim} is not divisible by {heads} heads")
        if self.patch_size < 1 or self.window_size < 1 or self.in_channels < 1:
            raise ConfigError("patch_size, window_size and in_channels must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")


def stage_window(grid: int, window_size: int) -> tuple[int, int]:
    """Effective (window, shift) on a ``grid``-sided token map.

    A grid no larger than the window is attended as a single unshifted window.
    """
    if grid <= window_size:
        return grid, 0
    return window_size, window_size // 2


def check_input_size(height: int, width: int, cfg: EncoderConfig) -> None:
    """Raise :class:`ShapeError` naming the first violated size constraint."""
    if height != width:
        raise ShapeError(f"square inputs only, got {height}x{width}")
    factor = cfg.patch_size * 2 ** (cfg.num_stages - 1)
    if height % factor:
        raise ShapeError(
            f"image side {height} is not divisible by patch_size*2**(stages-1) = "
            f"{cfg.patch_size}*2**{cfg.num_stages - 1} = {factor}"
        )
    grid = height // cfg.patch_size
    for t in range(cfg.num_stages):
        win, _ = stage_window(grid, cfg.window_size)
        if grid % win:
            raise ShapeError(
                f"stage {t + 1} token grid {grid} is not divisible by window_size {win}"
            )
        grid //= 2


# -- parameters ---------------------------------------------------------------
def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params: dict[str, np.ndarray] = {}
    patch_dim = cfg.patch_size**2 * cfg.in_channels
    params["embed.w"] = trunc_normal((patch_dim, cfg.embed_dim), rng)
    params["embed.b"] = np.zeros(cfg.embed_dim)
    ws = cfg.window_size
    for t in range(cfg.num_stages):
        dim = cfg.stage_dim(t)
        if t > 0:
            prev = cfg.stage_dim(t - 1)
            params[f"stage{t + 1}.merge.norm.g"] = np.ones(4 * prev)
            params[f"stage{t + 1}.merge.norm.b"] = np.zeros(4 * prev)
            params[f"stage{t + 1}.merge.w"] = trunc_normal((4 * prev, dim), rng)
        hidden = int(dim * cfg.mlp_ratio)
        for k in range(cfg.depths[t]):
            p = f"stage{t + 1}.block{k + 1}."
            params[p + "norm1.g"] = np.ones(dim)
            params[p + "norm1.b"] = np.zeros(dim)
            params[p + "attn.qkv.w"] = trunc_normal((dim, 3 * dim), rng)
            params[p + "attn.qkv.b"] = np.zeros(3 * dim)
            if cfg.use_relative_position_bias:
                params[p + "attn.rpb"] = trunc_normal(((2 * ws - 1) ** 2, cfg.num_heads[t]), rng)
            params[p + "attn.proj.w"] = trunc_normal((dim, dim), rng)
            params[p + "attn.proj.b"] = np.zeros(dim)
            params[p + "norm2.g"] = np.ones(dim)
            params[p + "norm2.b"] = np.zeros(dim)
            params[p + "mlp.fc1.w"] = trunc_normal((dim, hidden), rng)
            params[p + "mlp.fc1.b"] = np.zeros(hidden)
            params[p + "mlp.fc2.w"] = trunc_normal((hidden, dim), rng)
            params[p + "mlp.fc2.b"] = np.zeros(dim)
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


# -- building blocks ----------------------------------------------------------
def patch_embed(image: Tensor, w: Tensor, b: Tensor, patch_size: int) -> Tensor:
    """``[B, H, W, ch] -> [B, H/p, W/p, C]``: flatten each p x p x ch patch
    (row, col, channel order) and project linearly."""
    *lead, height, width, ch = image.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(f"image {height}x{width} is not divisible by patch_size {patch_size}")
    gh, gw = height // patch_size, width // patch_size
    x = T.reshape(image, (*lead, gh, patch_size, gw, patch_size, ch))
    n = len(lead)
    x = T.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    x = T.reshape(x, (*lead, gh, gw, patch_size * patch_size * ch))
    return T.linear(x, w, b)


def window_partition(x: Tensor, window: int) -> Tensor:
    """``[..., h, w, C] -> [..., nW, window**2, C]``, row-major windows."""
    *lead, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"token grid {h}x{w} is not divisible by window {window}")
    n = len(lead)
    x = T.reshape(x, (*lead, h // window, window, w // window, window, c))
    x = T.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(x, (*lead, (h // window) * (w // window), window * window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    *lead, nw, tokens, c = windows.shape
    if nw != (h // window) * (w // window) or tokens != window * window:
        raise ShapeError(f"windows {windows.shape} do not tile a {h}x{w} grid with window {window}")
    n = len(lead)
    x = T.reshape(windows, (*lead, h // window, w // window, window, window, c))
    x = T.transpose(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(x, (*lead, h, w, c))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Torus roll of the two spatial axes of ``[..., h, w, C]``."""
    return T.roll(x, (dy, dx), (-3, -2))


@lru_cache(maxsize=None)
def relative_position_index(window: int, table_window: int | None = None) -> np.ndarray:
    """``[T, T]`` rows into a ``(2*table_window-1)**2`` bias table.

    ``table_window`` defaults to ``window``; a smaller window reuses the
    central part of a larger table.
    """
    tw = window if table_window is None else table_window
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    idx = (rel[0] + tw - 1) * (2 * tw - 1) + (rel[1] + tw - 1)
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def shift_attention_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive ``[nW, T, T]`` mask for a grid rolled by ``(-shift, -shift)``.

    Tokens from different pre-shift regions in one window get ``MASK_VALUE``.
    """
    region = np.zeros((h, w), dtype=np.int64)
    spans = ((0, -window), (-window, -shift), (-shift, None))
    label = 0
    for ys in spans:
        for xs in spans:
            region[slice(*ys), slice(*xs)] = label
            label += 1
    r = region.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    r = r.reshape(-1, window * window)
    mask = np.where(r[:, None, :] != r[:, :, None], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def window_attention(
    windows: Tensor,
    qkv_w: Tensor,
    qkv_b: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    num_heads: int,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head self-attention inside each window.

    ``windows`` is ``[..., nW, T, C]``; ``bias`` is ``[heads, T, T]`` (learned
    relative position bias) and ``mask`` an additive ``[nW, T, T]`` array.
    """
    *lead, nw, tokens, c = windows.shape
    if c % num_heads:
        raise ConfigError(f"channels {c} not divisible by {num_heads} heads")
    d = c // num_heads
    x = T.reshape(windows, (-1, nw, tokens, c))
    qkv = T.linear(x, qkv_w, qkv_b)
    qkv = T.reshape(qkv, (-1, nw, tokens, 3, num_heads, d))
    qkv = T.transpose(qkv, (3, 0, 1, 4, 2, 5))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = T.matmul(T.scale(q, d**-0.5), T.transpose(k, (0, 1, 2, 4, 3)))
    if bias is not None:
        logits = T.add(logits, bias)
    if mask is not None:
        if mask.shape != (nw, tokens, tokens):
            raise ShapeError(f"mask {mask.shape} does not match {nw} windows of {tokens} tokens")
        logits = T.add(logits, Tensor(mask[:, None].astype(windows.dtype)))
    attn = T.softmax(logits, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 1, 3, 2, 4)), (-1, nw, tokens, c))
    out = T.linear(out, proj_w, proj_b)
    return T.reshape(out, (*lead, nw, tokens, c))


def _mlp(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.linear(x, params[prefix + "fc1.w"], params[prefix + "fc1.b"]))
    return T.linear(h, params[prefix + "fc2.w"], params[prefix + "fc2.b"])


def swin_block(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    num_heads: int,
    window_size: int,
    shifted: bool,
    eps: float = 1e-5,
) -> Tensor:
    """One transformer block on ``[B, h, w, C]``.

    ``window_size`` is the configured window; grids no larger than it run as
    one unshifted window. Shifted blocks roll by half a window and mask the
    seams.
    """
    *_, h, w, c = x.shape
    win, shift = stage_window(h, window_size)
    if not shifted:
        shift = 0
    y = T.layer_norm(x, params[prefix + "norm1.g"], params[prefix + "norm1.b"], eps)
    if shift:
        y = cyclic_shift(y, -shift, -shift)
    windows = window_partition(y, win)
    bias = None
    rpb = params.get(prefix + "attn.rpb")
    if rpb is not None:
        table_window = (int(round(np.sqrt(rpb.shape[0]))) + 1) // 2
        idx = relative_position_index(win, table_window)
        bias = T.transpose(T.take(rpb, idx), (2, 0, 1))
    mask = shift_attention_mask(h, w, win, shift) if shift else None
    attn = window_attention(
        windows,
        params[prefix + "attn.qkv.w"],
        params[prefix + "attn.qkv.b"],
        params[prefix + "attn.proj.w"],
        params[prefix + "attn.proj.b"],
        num_heads,
        bias,
        mask,
    )
    y = window_reverse(attn, win, h, w)
    if shift:
        y = cyclic_shift(y, shift, shift)
    x = T.add(x, y)
    z = T.layer_norm(x, params[prefix + "norm2.g"], params[prefix + "norm2.b"], eps)
    return T.add(x, _mlp(z, params, prefix + "mlp."))


def patch_merging(x: Tensor, norm_g: Tensor, norm_b: Tensor, w: Tensor, eps: float = 1e-5) -> Tensor:
    """``[..., h, w, C] -> [..., h/2, w/2, 2C]``.

    Each 2x2 neighbourhood is concatenated in the order (0,0), (1,0), (0,1),
    (1,1) as (row, col) offsets, normalised, then projected 4C -> 2C.
    """
    *lead, h, wd, c = x.shape
    if h % 2 or wd % 2:
        raise ShapeError(f"patch merging needs an even grid, got {h}x{wd}")
    n = len(lead)
    y = T.reshape(x, (*lead, h // 2, 2, wd // 2, 2, c))
    # -> [..., h/2, w/2, dx, dy, C] so the flattened order is dy fastest
    y = T.transpose(y, (*range(n), n, n + 2, n + 3, n + 1, n + 4))
    y = T.reshape(y, (*lead, h // 2, wd // 2, 4 * c))
    y = T.layer_norm(y, norm_g, norm_b, eps)
    return T.linear(y, w)


@dataclass
class StageFeatures:
    """Per-stage feature maps, finest first."""

    maps: list[Tensor] = field(default_factory=list)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [m.shape for m in self.maps]


def encode(images: Tensor, cfg: EncoderConfig, params: Mapping[str, Tensor]) -> StageFeatures:
    """Run every stage on ``[B, H, W, ch]`` images."""
    if images.ndim != 4:
        raise ShapeError(f"encode expects [B, H, W, ch] images, got {images.shape}")
    _, height, width, ch = images.shape
    if ch != cfg.in_channels:
        raise ShapeError(f"image has {ch} channels, model expects {cfg.in_channels}")
    check_input_size(height, width, cfg)
    x = patch_embed(images, params["embed.w"], params["embed.b"], cfg.patch_size)
    feats = StageFeatures()
    for t in range(cfg.num_stages):
        if t > 0:
            p = f"stage{t + 1}.merge."
            x = patch_merging(x, params[p + "norm.g"], params[p + "norm.b"], params[p + "w"], cfg.norm_eps)
        for k in range(cfg.depths[t]):
            x = swin_block(
                x,
                params,
                f"stage{t + 1}.block{k + 1}.",
                cfg.num_heads[t],
                cfg.window_size,
                shifted=bool(k % 2),
                eps=cfg.norm_eps,
            )
        feats.maps.append(x)
    return feats
