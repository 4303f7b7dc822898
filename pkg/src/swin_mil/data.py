"""Synthetic bag datasets, P5 PGM images and TAB-separated manifests.

Directory layout written by :func:`generate_synthetic`::

    root/
      images/img_0000.pgm ...
      masks/mask_0000.pgm ...
      manifest.tsv          # label<TAB>split<TAB>image<TAB>mask-or-dash

Training code receives :class:`TrainingBag` objects, which carry only the
image and its bag label.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import FormatError

MANIFEST_NAME = "manifest.tsv"

# -- PGM ------------------------------------------------------------------------
_TOKEN = re.compile(rb"\S+")


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise FormatError("truncated PGM header", pos)
        if buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment in PGM header", pos)
            pos = end + 1
            continue
        m = _TOKEN.match(buf, pos)
        tok = m.group(0)
        if b"#" in tok:
            tok = tok.split(b"#", 1)[0]
        tokens.append(tok)
        pos += len(tok)
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", pos)
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    """Parse a binary (P5) 8-bit PGM into a ``uint8`` array ``[H, W]``."""
    if buf[:2] != b"P5":
        raise FormatError(f"not a binary PGM (magic {buf[:2]!r})", 0)
    tokens, offset = _header_tokens(buf, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"non-numeric PGM header field in {tokens[1:]!r}", 2) from None
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM dimensions {width}x{height}", 2)
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (only 255)", 2)
    need = width * height
    if len(buf) - offset < need:
        raise FormatError(f"truncated PGM raster: expected {need} bytes, found {len(buf) - offset}", offset)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"encode_pgm expects a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def quantize(image: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` reals (or booleans) to 8-bit codes."""
    image = np.asarray(image)
    if image.dtype == bool:
        return np.where(image, 255, 0).astype(np.uint8)
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def save_pgm(path, image) -> None:
    """Save a ``[H, W]`` (or ``[H, W, 1]``) image in [0, 1] or a boolean mask."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    Path(path).write_bytes(encode_pgm(quantize(image)))


def load_pgm(path) -> np.ndarray:
    """Load a P5 PGM as ``float32`` values ``v / 255``, shape ``[H, W]``."""
    return decode_pgm(Path(path).read_bytes()).astype(np.float32) / np.float32(255.0)


def load_mask(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes()) >= 128


# -- bags -------------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class TrainingBag:
    """The only view of a bag the trainer receives: image and bag label."""

    image: np.ndarray
    label: int


@dataclass
class Bag:
    """One image with its bag label and, for evaluation, its pixel mask."""

    image: np.ndarray
    label: int
    gt_mask: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"bag label must be 0 or 1, got {self.label!r}")
        if self.label == 0 and self.gt_mask is not None and np.any(self.gt_mask):
            raise ValueError(f"negative bag {self.name!r} has a nonempty mask")

    def training_view(self) -> TrainingBag:
        return TrainingBag(image=self.image, label=self.label)


@dataclass(frozen=True)
class ManifestEntry:
    label: int
    split: str
    image: Path
    mask: Path | None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def splits(self) -> list[str]:
        return sorted({e.split for e in self.entries})

    def select(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def training_bags(self, split: str = "train") -> list[TrainingBag]:
        """Images and labels of ``split``; mask files are never opened."""
        return [TrainingBag(image=load_pgm(e.image)[..., None], label=e.label) for e in self.select(split)]

    def load_bags(self, split: str, require_masks: bool = True) -> list[Bag]:
        bags = []
        for e in self.select(split):
            if e.mask is None and require_masks:
                raise FileNotFoundError(f"split {split!r}: no mask for {e.image}")
            if e.mask is not None and not e.mask.is_file():
                raise FileNotFoundError(f"split {split!r}: missing mask file {e.mask}")
            mask = load_mask(e.mask) if e.mask is not None else None
            bags.append(Bag(image=load_pgm(e.image)[..., None], label=e.label, gt_mask=mask, name=e.image.name))
        return bags


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest (a directory means its ``manifest.tsv``)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[Path, int] = {}
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}: expected 4 TAB-separated fields, got {len(parts)}", lineno)
        label_s, split, image_s, mask_s = parts
        if label_s not in ("0", "1"):
            raise FormatError(f"{path}: label must be 0 or 1, got {label_s!r}", lineno)
        if not split:
            raise FormatError(f"{path}: empty split name", lineno)
        image = (root / image_s).resolve()
        mask = None if mask_s == "-" else (root / mask_s).resolve()
        # masks are only needed for evaluation and are checked when loaded
        if not image.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: missing image {image}")
        if image in seen:
            raise FormatError(f"{path}: image {image_s} already listed on line {seen[image]}", lineno)
        seen[image] = lineno
        entries.append(ManifestEntry(label=int(label_s), split=split, image=image, mask=mask))
    return DatasetManifest(root=root, entries=entries)


def write_manifest(path, rows: Iterable[tuple[int, str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, split, image, mask in rows:
            fh.write(f"{label}\t{split}\t{image}\t{mask}\n")


# -- synthetic generator -------------------------------------------------------
MIN_FOREGROUND = 0.05
MAX_FOREGROUND = 0.5


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24, mode="wrap")
    noise /= noise.std() + 1e-12
    return 0.40 + 0.07 * noise


def _ellipse_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    a = rng.uniform(0.12, 0.30) * size
    b = rng.uniform(0.12, 0.30) * size
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synth_bag(rng: np.random.Generator, size: int, positive: bool) -> tuple[np.ndarray, np.ndarray]:
    """One ``(image, mask)`` pair; images are already 8-bit quantized."""
    image = _background(rng, size)
    mask = np.zeros((size, size), dtype=bool)
    if positive:
        while True:
            mask = np.zeros((size, size), dtype=bool)
            for _ in range(int(rng.integers(1, 4))):
                mask |= _ellipse_mask(rng, size)
            frac = mask.mean()
            if MIN_FOREGROUND <= frac <= MAX_FOREGROUND:
                break
        texture = gaussian_filter(rng.standard_normal((size, size)), sigma=0.7, mode="wrap")
        texture /= texture.std() + 1e-12
        image = np.where(mask, 0.72 + 0.10 * texture, image)
    image = np.clip(image, 0.0, 1.0)
    return quantize(image).astype(np.float32) / np.float32(255.0), mask


def generate_synthetic(
    out_dir,
    num_pos: int,
    num_neg: int,
    size: int = 64,
    seed: int = 0,
    test_fraction: float = 0.25,
) -> DatasetManifest:
    """Write a seeded synthetic dataset and return its manifest.

    Per class, the last ``round(n * test_fraction)`` images go to the
    ``test`` split, the rest to ``train``.
    """
    if num_pos < 0 or num_neg < 0:
        raise ValueError("image counts must be nonnegative")
    if size < 1:
        raise ValueError(f"image size must be positive, got {size}")
    if not 0 <= test_fraction <= 1:
        raise ValueError(f"test_fraction must lie in [0, 1], got {test_fraction}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(num_pos + num_neg)
    rows = []
    idx = 0
    for positive, count in ((True, num_pos), (False, num_neg)):
        n_test = int(round(count * test_fraction))
        for k in range(count):
            image, mask = synth_bag(np.random.default_rng(children[idx]), size, positive)
            img_rel = f"images/img_{idx:04d}.pgm"
            mask_rel = f"masks/mask_{idx:04d}.pgm"
            save_pgm(out / img_rel, image)
            save_pgm(out / mask_rel, mask)
            split = "test" if k >= count - n_test else "train"
            rows.append((int(positive), split, img_rel, mask_rel))
            idx += 1
    write_manifest(out / MANIFEST_NAME, rows)
    return load_manifest(out / MANIFEST_NAME)
