"""Adam with parameter groups, the training loop, and SMC1 checkpoints."""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ._kv import format_value, parse_value
from .encoder import check_input_size
from .exceptions import ConfigError, FormatError, NonFiniteError
from .model import ModelConfig, SwinMIL, xavier_uniform
from .tensor import Tensor, decode_smt1, encode_smt1

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Adam",
    "xavier_init",
    "train",
    "TrainResult",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "make_checkpoint",
    "restore",
    "loss_log_header",
    "write_loss_log",
]


def xavier_init(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    return Tensor(xavier_uniform(shape, rng).astype(dtype), requires_grad=True)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation hyperparameters. Defaults are the desk-scale preset."""

    global_lr: float = 1e-3
    side_output_lr_ratio: float = 0.01
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.global_lr < 0 or self.side_output_lr_ratio < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be positive")

    @classmethod
    def full_schedule(cls, **overrides) -> "TrainConfig":
        """Full-length schedule: lr 1e-6, weight decay 5e-4, batch 4, 60 epochs."""
        return cls(**{"global_lr": 1e-6, "epochs": 60, **overrides})

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


class Adam:
    """Adam with bias correction and L2-coupled weight decay (``g += wd * p``).

    ``lr_scale`` maps parameter names to a multiplier on the global rate;
    the side-output group uses ``side_output_lr_ratio``.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        lr_scale: Mapping[str, float] | None = None,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = dict(lr_scale or {})
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def group_lr(self, name: str) -> float:
        return self.lr * self.lr_scale.get(name, 1.0)

    def step(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(
                    f"non-finite gradient in parameter {name!r} "
                    f"({int(np.sum(~np.isfinite(p.grad)))} of {p.size} entries) at step {self.step_count + 1}"
                )
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            dt = p.dtype.type
            g = p.grad
            if self.weight_decay:
                g = g + dt(self.weight_decay) * p.data
            m = self.m[name]
            v = self.v[name]
            m *= dt(self.beta1)
            m += dt(1.0 - self.beta1) * g
            v *= dt(self.beta2)
            v += dt(1.0 - self.beta2) * (g * g)
            m_hat = m / dt(bc1)
            v_hat = v / dt(bc2)
            p.data = p.data - dt(self.group_lr(name)) * m_hat / (np.sqrt(v_hat) + dt(self.eps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def make_optimizer(model: SwinMIL, cfg: TrainConfig) -> Adam:
    scale = {name: cfg.side_output_lr_ratio for name in model.params if name.startswith("side")}
    return Adam(
        model.params,
        lr=cfg.global_lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
        lr_scale=scale,
    )


# -- checkpoints ----------------------------------------------------------------
SMC1_MAGIC = b"SMC1"
SMC1_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume training."""

    config: dict[str, str]
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = SMC1_VERSION

    @property
    def epoch(self) -> int:
        return int(self.config.get("state.epoch", "0"))

    def model_config(self) -> ModelConfig:
        return _section(self.config, "model.", ModelConfig)

    def train_config(self) -> TrainConfig:
        return _section(self.config, "train.", TrainConfig)

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not (k.endswith(".m") or k.endswith(".v"))}


def _config_lines(model_cfg: ModelConfig, train_cfg: TrainConfig, epoch: int) -> dict[str, str]:
    out = {f"model.{k}": format_value(v) for k, v in asdict(model_cfg).items()}
    out.update({f"train.{k}": format_value(v) for k, v in asdict(train_cfg).items()})
    out["state.epoch"] = str(epoch)
    return out


def _section(cfg: Mapping[str, str], prefix: str, cls):
    names = {f.name for f in fields(cls)}
    kw = {}
    for key, raw in cfg.items():
        if key.startswith(prefix) and key[len(prefix):] in names:
            kw[key[len(prefix):]] = parse_value(key[len(prefix):], raw)
    return cls(**kw)


def make_checkpoint(model: SwinMIL, opt: Adam, train_cfg: TrainConfig, epoch: int, rng: np.random.Generator) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[name] = p.data
        tensors[name + ".m"] = opt.m[name]
        tensors[name + ".v"] = opt.v[name]
    return Checkpoint(
        config=_config_lines(model.config, train_cfg, epoch),
        tensors=tensors,
        step=opt.step_count,
        rng_state=rng.bit_generator.state,
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(SMC1_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    block = "".join(f"{k}={v}\n" for k, v in ckpt.config.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(encode_smt1(arr))
    buf.write(struct.pack("<Q", ckpt.step))
    rng = json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(rng)))
    buf.write(rng)
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    def need(pos: int, n: int, what: str) -> None:
        if len(data) < pos + n:
            raise FormatError(f"truncated checkpoint: expected {what}", pos)

    if data[:4] != SMC1_MAGIC:
        raise FormatError("not an SMC1 checkpoint (bad magic)", 0)
    need(4, 4, "version")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != SMC1_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {SMC1_VERSION})", 4)
    pos = 8
    need(pos, 4, "config length")
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    need(pos, n, "config block")
    try:
        text = data[pos : pos + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("config block is not UTF-8", pos) from exc
    config = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"bad config line {line!r}", pos)
        config[key] = value
    pos += n
    need(pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        need(pos, 2, "tensor name length")
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(pos, ln, "tensor name")
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        tensors[name], pos = decode_smt1(data, pos)
    need(pos, 8, "step counter")
    (step,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    need(pos, 4, "rng state length")
    (ln,) = struct.unpack_from("<I", data, pos)
    pos += 4
    need(pos, ln, "rng state")
    rng_state = json.loads(data[pos : pos + ln].decode("utf-8"))
    pos += ln
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint", pos)
    return Checkpoint(config=config, tensors=tensors, step=step, rng_state=rng_state, version=version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def restore(ckpt: Checkpoint) -> tuple[SwinMIL, Adam, TrainConfig, np.random.Generator]:
    """Rebuild model, optimizer state and RNG from a checkpoint."""
    train_cfg = ckpt.train_config()
    model = SwinMIL(ckpt.model_config())
    model.load_state_dict(ckpt.parameters())
    opt = make_optimizer(model, train_cfg)
    for name in model.params:
        opt.m[name] = ckpt.tensors[name + ".m"].astype(model.dtype)
        opt.v[name] = ckpt.tensors[name + ".v"].astype(model.dtype)
    opt.step_count = ckpt.step
    rng = np.random.default_rng()
    if ckpt.rng_state:
        rng.bit_generator.state = ckpt.rng_state
    return model, opt, train_cfg, rng


# -- training loop ----------------------------------------------------------------
def loss_log_header(num_stages: int) -> tuple[str, ...]:
    return ("epoch", "step", *(f"L_mil_{t + 1}" for t in range(num_stages)), "L_fuse", "L")


@dataclass
class TrainResult:
    model: SwinMIL
    optimizer: Adam
    log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    rng: np.random.Generator | None = None
    epoch: int = 0


def _stack_training_bags(bags) -> tuple[np.ndarray, np.ndarray]:
    # Only (image, label) are read; ground-truth masks are not part of the view.
    images = np.stack([np.asarray(b.image, dtype=np.float32) for b in bags])
    labels = np.asarray([int(b.label) for b in bags])
    if images.ndim == 3:
        images = images[..., None]
    return images, labels


def train(
    bags: Sequence,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fit a model on weakly labelled bags.

    ``bags`` is a sequence of objects exposing only ``image`` and ``label``
    (see :class:`swin_mil.data.TrainingBag`). Each epoch shuffles with the
    seeded RNG, then for each batch runs forward, pools, sums the
    deep-supervision losses, backpropagates and takes one Adam step. With
    ``out_dir`` a checkpoint ``epoch_XXX.smc`` is written after every epoch.
    ``max_steps`` stops early (mid-epoch) after that many optimizer steps in
    this call.
    """
    if len(bags) == 0:
        raise ValueError("training set is empty")
    images, labels = _stack_training_bags(bags)
    if not np.all(np.isfinite(images)):
        raise ValueError("training images contain non-finite values")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError(f"bag labels must be 0 or 1, got {sorted(set(labels.tolist()))}")

    if resume is not None:
        model, opt, train_cfg_ckpt, rng = restore(resume)
        train_cfg = train_cfg or train_cfg_ckpt
        start_epoch = resume.epoch
    else:
        model_cfg = model_cfg or ModelConfig()
        train_cfg = train_cfg or TrainConfig()
        rng = np.random.default_rng(train_cfg.seed)
        model = SwinMIL(model_cfg, seed=rng)
        opt = make_optimizer(model, train_cfg)
        start_epoch = 0

    cfg = model.config
    if images.shape[-1] != cfg.in_channels:
        raise ValueError(f"images have {images.shape[-1]} channels, model expects {cfg.in_channels}")
    check_input_size(images.shape[1], images.shape[2], cfg.encoder)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    result = TrainResult(model=model, optimizer=opt, rng=rng, epoch=start_epoch)
    steps_done = 0
    n = len(images)
    try:
        for epoch in range(start_epoch + 1, train_cfg.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                if max_steps is not None and steps_done >= max_steps:
                    return result
                idx = order[start : start + train_cfg.batch_size]
                opt.zero_grad()
                total, parts = model.loss(images[idx], labels[idx])
                value = total.item()
                if not np.isfinite(value):
                    raise NonFiniteError(f"loss became {value} at epoch {epoch}, step {opt.step_count + 1}")
                total.backward()
                opt.step()
                steps_done += 1
                row = {"epoch": epoch, "step": opt.step_count}
                for t, p in enumerate(parts[:-1]):
                    row[f"L_mil_{t + 1}"] = p.item()
                row["L_fuse"] = parts[-1].item()
                row["L"] = value
                result.log.append(row)
                if callback is not None:
                    callback(row)
            result.epoch = epoch
            logger.info("epoch %d: mean loss %.5f", epoch, np.mean([r["L"] for r in result.log if r["epoch"] == epoch]))
            if out_dir is not None:
                path = out_dir / f"epoch_{epoch:03d}.smc"
                save_checkpoint(path, make_checkpoint(model, opt, train_cfg, epoch, rng))
                result.checkpoints.append(path)
    except NonFiniteError as exc:
        exc.log = result.log
        raise
    return result


def write_loss_log(path, log: Sequence[dict], num_stages: int) -> None:
    header = loss_log_header(num_stages)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in log:
            fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in header) + "\n")
