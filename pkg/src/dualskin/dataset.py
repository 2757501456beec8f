"""Samples, manifest ingestion, augmentation and the skin/body batch scheduler.

A manifest is a UTF-8 JSON-lines file. Each record has an ``id``, an ``image``
path and at least one of ``skin_mask`` / ``body_mask``; paths are relative to
the manifest's directory. Images are 8-bit RGB rasters, masks 8-bit
single-channel rasters with 255 marking positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import ConfigError, InputError, ValidationError
from .validation import check_mask, check_random_state

MASK_THRESHOLD = 128


@dataclass(frozen=True)
class LabelFlags:
    skin: int
    body: int

    def __post_init__(self):
        if self.skin not in (0, 1) or self.body not in (0, 1):
            raise ValidationError(f"label flags must be 0/1, got ({self.skin}, {self.body})")
        if self.skin + self.body < 1:
            raise ValidationError("a sample needs at least one label")

    def as_tuple(self):
        return (self.skin, self.body)


@dataclass(frozen=True)
class SampleDescriptor:
    id: str
    image: Path
    skin_mask: Optional[Path]
    body_mask: Optional[Path]

    @property
    def flags(self) -> LabelFlags:
        return LabelFlags(int(self.skin_mask is not None), int(self.body_mask is not None))


@dataclass
class Sample:
    """One portrait with whichever masks exist for it.

    ``image`` is float32 H x W x 3 in [0, 1]; masks are uint8 H x W in {0, 1}.
    Flags are derived from mask presence.
    """

    id: str
    image: np.ndarray
    skin_mask: Optional[np.ndarray] = None
    body_mask: Optional[np.ndarray] = None
    flags: LabelFlags = field(init=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"sample {self.id}: image must be H x W x 3")
        hw = self.image.shape[:2]
        if self.skin_mask is not None:
            self.skin_mask = check_mask(self.skin_mask, hw, f"sample {self.id} skin mask")
        if self.body_mask is not None:
            self.body_mask = check_mask(self.body_mask, hw, f"sample {self.id} body mask")
        self.flags = LabelFlags(int(self.skin_mask is not None), int(self.body_mask is not None))

    @property
    def shape(self):
        return self.image.shape[:2]

    def containment_violations(self) -> int:
        """Number of skin-positive pixels outside the body mask (0 if either is absent)."""
        if self.skin_mask is None or self.body_mask is None:
            return 0
        return int(np.count_nonzero((self.skin_mask == 1) & (self.body_mask == 0)))


@dataclass(frozen=True)
class AugmentConfig:
    flip_probability: float = 0.5
    scale_range: tuple = (1.0, 1.25)
    crop_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability must be in [0, 1]")
        lo, hi = self.scale_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        if self.crop_size < 1:
            raise ConfigError("crop_size must be positive")


def load_manifest(path) -> list[SampleDescriptor]:
    """Parse a JSON-lines manifest into descriptors, preserving order."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    seen = set()
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: malformed record ({exc})") from exc
        sid = rec.get("id")
        if not isinstance(sid, str) or not sid:
            raise ValidationError(f"{path}:{lineno}: record has no id")
        if sid in seen:
            raise ValidationError(f"duplicate sample id {sid!r} in {path}")
        seen.add(sid)
        if "image" not in rec:
            raise ValidationError(f"sample {sid!r}: no image path")
        skin = rec.get("skin_mask")
        body = rec.get("body_mask")
        if skin is None and body is None:
            raise ValidationError(f"sample {sid!r}: neither skin nor body mask given")
        paths = {"image": root / rec["image"]}
        if skin is not None:
            paths["skin_mask"] = root / skin
        if body is not None:
            paths["body_mask"] = root / body
        for kind, p in paths.items():
            if not p.is_file():
                raise InputError(f"sample {sid!r}: {kind} file not found: {p}")
        out.append(
            SampleDescriptor(sid, paths["image"], paths.get("skin_mask"), paths.get("body_mask"))
        )
    return out


def _read_raster(path, sid):
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise InputError(f"sample {sid!r}: cannot decode {path}: {exc}") from exc
    return img


def _load_mask(path, size, image_size, sid):
    img = _read_raster(path, sid)
    if img.mode not in ("L", "1"):
        raise ValidationError(f"sample {sid!r}: mask {path} is not grayscale (mode {img.mode})")
    if img.size != image_size:
        raise ValidationError(
            f"sample {sid!r}: mask {path} is {img.size}, image is {image_size}"
        )
    img = img.convert("L")
    if size is not None:
        img = img.resize((size, size), Image.NEAREST)
    return (np.asarray(img) >= MASK_THRESHOLD).astype(np.uint8)


def load_sample(desc: SampleDescriptor, size: Optional[int] = 64) -> Sample:
    """Decode a descriptor; resize to ``size`` x ``size`` unless ``size`` is None.

    Images are resized bilinearly, masks with nearest neighbour so they stay binary.
    """
    img = _read_raster(desc.image, desc.id).convert("RGB")
    raw_size = img.size
    if size is not None:
        img = img.resize((size, size), Image.BILINEAR)
    image = np.asarray(img, dtype=np.float32) / 255.0
    skin = body = None
    if desc.skin_mask is not None:
        skin = _load_mask(desc.skin_mask, size, raw_size, desc.id)
    if desc.body_mask is not None:
        body = _load_mask(desc.body_mask, size, raw_size, desc.id)
    return Sample(desc.id, image, skin, body)


def load_dataset(manifest, size: Optional[int] = 64) -> list[Sample]:
    return [load_sample(d, size) for d in load_manifest(manifest)]


def hflip(sample: Sample) -> Sample:
    flip = lambda a: None if a is None else np.ascontiguousarray(a[:, ::-1])
    return Sample(sample.id, flip(sample.image), flip(sample.skin_mask), flip(sample.body_mask))


def _resize(arr, hw, mode):
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if t.ndim == 2:
        t = t[None, None].float()
        out = F.interpolate(t, size=hw, mode="nearest")[0, 0]
        return out.numpy().astype(arr.dtype)
    t = t.permute(2, 0, 1)[None].float()
    out = F.interpolate(t, size=hw, mode=mode, align_corners=False)[0].permute(1, 2, 0)
    return out.clamp(0.0, 1.0).numpy().astype(np.float32)


def augment(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    """Random horizontal flip, rescale and crop, applied identically to image and masks.

    Always consumes the same number of draws from ``rng`` so streams stay aligned.
    """
    rng = check_random_state(rng)
    do_flip = rng.random() < cfg.flip_probability
    scale = rng.uniform(*cfg.scale_range)
    u_top, u_left = rng.random(2)

    h, w = sample.shape
    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if cfg.crop_size > sh or cfg.crop_size > sw:
        raise ValidationError(
            f"crop {cfg.crop_size} larger than scaled image {sh}x{sw} (sample {sample.id})"
        )
    if do_flip:
        sample = hflip(sample)
    top = int(u_top * (sh - cfg.crop_size + 1))
    left = int(u_left * (sw - cfg.crop_size + 1))
    win = (slice(top, top + cfg.crop_size), slice(left, left + cfg.crop_size))

    def tf(arr, mode):
        if arr is None:
            return None
        if (sh, sw) != (h, w):
            arr = _resize(arr, (sh, sw), mode)
        return np.ascontiguousarray(arr[win])

    return Sample(
        sample.id,
        tf(sample.image, "bilinear"),
        tf(sample.skin_mask, "nearest"),
        tf(sample.body_mask, "nearest"),
    )


class _Cycler:
    """Endless reshuffling iterator over a fixed list."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self.order = []

    def take(self, n):
        out = []
        while len(out) < n:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self.order.pop(0)])
        return out


def alternating_batches(
    skin_set: Sequence, body_set: Sequence, batch_size: int, rng
) -> Iterator[list]:
    """Yield batches forever: even iterations from ``skin_set``, odd from ``body_set``.

    Each set is shuffled per pass and cycled independently, so sets of
    different sizes are fine.
    """
    if len(skin_set) == 0 or len(body_set) == 0:
        raise ConfigError("alternating_batches needs non-empty skin and body sets")
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    rng = check_random_state(rng)
    skin, body = _Cycler(skin_set, rng), _Cycler(body_set, rng)
    while True:
        yield skin.take(batch_size)
        yield body.take(batch_size)


def split_by_label(samples: Sequence[Sample]):
    """Partition samples into (skin-labeled, body-labeled); dual-labeled go to both."""
    skin = [s for s in samples if s.flags.skin]
    body = [s for s in samples if s.flags.body]
    return skin, body


def with_masks(sample: Sample, skin=None, body=None) -> Sample:
    return replace(sample, skin_mask=skin, body_mask=body)
