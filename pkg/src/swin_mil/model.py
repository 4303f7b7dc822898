"""The assembled network: encoder, per-stage side outputs, fusion and pooling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, encode, init_encoder_params
from .exceptions import ConfigError
from .head import HeadConfig, SideOutputs, default_fusion_weights, fuse, gm_pool, side_output, total_loss
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the desk-scale preset."""

    in_channels: int = 1
    patch_size: int = 4
    embed_dim: int = 24
    depths: tuple[int, ...] = (2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12)
    window_size: int = 4
    mlp_ratio: float = 4.0
    use_relative_position_bias: bool = True
    r: float = 4.0
    fusion_weights: tuple[float, ...] | None = None
    clamp_eps: float = 1e-7
    threshold: float = 0.5
    # fixed affine input normalization, (x - mean) / std
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "num_heads", tuple(int(h) for h in self.num_heads))
        if self.fusion_weights is None:
            object.__setattr__(self, "fusion_weights", default_fusion_weights(len(self.depths)))
        else:
            object.__setattr__(self, "fusion_weights", tuple(float(w) for w in self.fusion_weights))
        if len(self.fusion_weights) != len(self.depths):
            raise ConfigError(
                f"{len(self.fusion_weights)} fusion weights for {len(self.depths)} stages"
            )
        if self.input_std <= 0:
            raise ConfigError(f"input_std must be positive, got {self.input_std}")
        # building the sub-configs validates them
        self.encoder, self.head

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            in_channels=self.in_channels,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depths=self.depths,
            num_heads=self.num_heads,
            window_size=self.window_size,
            mlp_ratio=self.mlp_ratio,
            use_relative_position_bias=self.use_relative_position_bias,
        )

    @property
    def head(self) -> HeadConfig:
        return HeadConfig(r=self.r, fusion_weights=self.fusion_weights, clamp_eps=self.clamp_eps)

    @classmethod
    def desk(cls, stages: int = 3, **overrides) -> "ModelConfig":
        """Desk-scale preset; ``stages`` picks the 2/3/4-stage ablation ladder."""
        depths = (2,) * stages
        heads = tuple(3 * 2**t for t in range(stages))
        return cls(depths=depths, num_heads=heads, **overrides)

    @classmethod
    def swin_t(cls, stages: int = 3, **overrides) -> "ModelConfig":
        """Swin-T dimensions (needs inputs that are multiples of 224)."""
        depths = (2, 2, 6, 2)[:stages]
        heads = (3, 6, 12, 24)[:stages]
        return cls(embed_dim=96, depths=depths, num_heads=heads, window_size=7, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


MODEL_CONFIG_KEYS = tuple(f.name for f in fields(ModelConfig))


def side_param_names(num_stages: int) -> list[str]:
    return [f"side{t + 1}.{k}" for t in range(num_stages) for k in ("w", "b")]


def xavier_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform on ``[-a, a]`` with ``a = sqrt(6 / (fan_in + fan_out))``.

    For 2-D shapes ``(fan_in, fan_out)``; higher ranks fold trailing axes
    into a receptive field multiplier, as for conv kernels.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ConfigError(f"xavier init needs a 2-D-interpretable shape, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[0] * receptive, shape[1] * receptive
    if fan_in < 1 or fan_out < 1:
        raise ConfigError(f"degenerate fan values for shape {shape}")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class SwinMIL:
    """Parameter container plus forward pass.

    ``params`` maps dotted names to leaf tensors. Side-output decoder
    parameters are named ``side<t>.w`` / ``side<t>.b``.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int | np.random.Generator = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = init_encoder_params(self.config.encoder, rng, dtype)
        for t in range(self.config.num_stages):
            dim = self.config.encoder.stage_dim(t)
            self.params[f"side{t + 1}.w"] = Tensor(xavier_uniform((dim, 1), rng).astype(dtype), requires_grad=True, name=f"side{t + 1}.w")
            self.params[f"side{t + 1}.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True, name=f"side{t + 1}.b")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "SwinMIL":
        clone = object.__new__(SwinMIL)
        clone.config = self.config
        clone.params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return clone

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    # -- forward ----------------------------------------------------------
    def _as_images(self, images) -> Tensor:
        if isinstance(images, Tensor):
            x = images
        else:
            x = Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 3 and self.config.in_channels == 1:
            x = T.reshape(x, x.shape + (1,))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        return x

    def forward(self, images) -> SideOutputs:
        """``[B, H, W, ch]`` (or ``[B, H, W]`` for one channel) -> side outputs."""
        x = self._as_images(images)
        height, width = x.shape[1], x.shape[2]
        cfg = self.config
        if cfg.input_mean != 0.0 or cfg.input_std != 1.0:
            x = T.scale(T.sub(x, cfg.input_mean), 1.0 / cfg.input_std)
        feats = encode(x, cfg.encoder, self.params)
        maps = [
            side_output(f, self.params[f"side{t + 1}.w"], self.params[f"side{t + 1}.b"], height, width)
            for t, f in enumerate(feats.maps)
        ]
        return SideOutputs(per_stage=maps, fused=fuse(maps, self.config.fusion_weights))

    __call__ = forward

    def bag_scores(self, outputs: SideOutputs) -> tuple[list[Tensor], Tensor]:
        r, eps = self.config.r, self.config.clamp_eps
        return [gm_pool(m, r, eps) for m in outputs.per_stage], gm_pool(outputs.fused, r, eps)

    def loss(self, images, labels) -> tuple[Tensor, list[Tensor]]:
        """Deep-supervision objective for one batch: ``(total, components)``."""
        outputs = self.forward(images)
        side_scores, fused_score = self.bag_scores(outputs)
        return total_loss(side_scores, fused_score, labels, self.config.clamp_eps)

    def predict(self, images, batch_size: int = 16) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
        """Inference without recording a graph.

        Returns ``(per_stage_maps, fused_map, fused_bag_score)`` as arrays.
        """
        x = self._as_images(images)
        stage_chunks: list[list[np.ndarray]] = [[] for _ in range(self.config.num_stages)]
        fused_chunks, score_chunks = [], []
        with T.no_grad():
            for start in range(0, x.shape[0], batch_size):
                out = self.forward(Tensor(x.data[start : start + batch_size]))
                for t, m in enumerate(out.per_stage):
                    stage_chunks[t].append(m.data)
                fused_chunks.append(out.fused.data)
                score_chunks.append(gm_pool(out.fused, self.config.r, self.config.clamp_eps).data)
        stages = [np.concatenate(c) for c in stage_chunks]
        return stages, np.concatenate(fused_chunks), np.concatenate(score_chunks)
