"""Procedural portrait-like scenes with exact skin and body ground truth.

Figures are compositions of ellipses (legs, torso, arms, neck, head, hair).
Skin covers face, neck and forearms/hands; body is the whole silhouette, so
skin is contained in body by construction. Clothing colours overlap skin
tones on purpose, and skin-coloured blobs are scattered over the background.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ConfigError, InputError, ValidationError

SKIN_TONES = (
    (0.96, 0.80, 0.69),
    (0.89, 0.68, 0.54),
    (0.78, 0.57, 0.42),
    (0.63, 0.43, 0.30),
    (0.46, 0.31, 0.21),
    (0.98, 0.87, 0.77),
)

# the last three are close to skin tones
CLOTHING = (
    (0.15, 0.20, 0.50),
    (0.70, 0.12, 0.12),
    (0.12, 0.45, 0.22),
    (0.90, 0.90, 0.88),
    (0.20, 0.20, 0.22),
    (0.50, 0.50, 0.60),
    (0.86, 0.71, 0.56),
    (0.72, 0.53, 0.39),
    (0.93, 0.78, 0.66),
)

HAIR = (
    (0.10, 0.07, 0.05),
    (0.35, 0.22, 0.12),
    (0.80, 0.66, 0.36),
    (0.05, 0.05, 0.05),
)

SKIN_NOISE = 0.04
SKIN_SHADE = 0.08
MAX_ATTEMPTS = 100
BLOB_CONCENTRATION = 60.0

BACKGROUND, CLOTH, SKIN = 0, 1, 2


@dataclass
class SceneParams:
    image_size: int = 64
    n_figures: int = 2
    skin_tone_palette: list = field(default_factory=lambda: [list(c) for c in SKIN_TONES])
    clothing_palette: list = field(default_factory=lambda: [list(c) for c in CLOTHING])
    background_distractor_rate: float = 0.6
    lighting_tint_strength: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError("image_size must be at least 32")
        if not 1 <= self.n_figures <= 3:
            raise ConfigError("n_figures must be between 1 and 3")
        if not self.skin_tone_palette or not self.clothing_palette:
            raise ConfigError("palettes must be non-empty")
        for name in ("background_distractor_rate", "lighting_tint_strength"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")


def _ellipse(shape, center, radii, angle=0.0):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy + 0.5 - center[0], xx + 0.5 - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 <= 1.0


def _figure(shape, rng, cx, top, fh, skin_tone, palette):
    """Paint one figure; returns a list of (region mask, label, colour) layers."""
    pick = lambda pal: np.asarray(pal[rng.integers(len(pal))], dtype=np.float64)
    shirt, pants, hair = pick(palette), pick(palette), pick(HAIR)
    short_sleeves = rng.random() < 0.5
    layers = []

    for side in (-1, 1):
        leg = _ellipse(shape, (top + 0.78 * fh, cx + side * 0.075 * fh), (0.065 * fh, 0.21 * fh))
        layers.append((leg, CLOTH, pants))
    layers.append((_ellipse(shape, (top + 0.46 * fh, cx), (0.17 * fh, 0.22 * fh)), CLOTH, shirt))

    for side in (-1, 1):
        # angle measured from straight down, swinging outward
        theta = rng.uniform(0.15, 1.3)
        dx, dy = side * math.sin(theta), math.cos(theta)
        sy, sx = top + 0.31 * fh, cx + side * 0.15 * fh
        axis = math.atan2(dy, dx)
        upper = _ellipse(shape, (sy + dy * 0.1 * fh, sx + dx * 0.1 * fh), (0.11 * fh, 0.05 * fh), axis)
        fore = _ellipse(shape, (sy + dy * 0.27 * fh, sx + dx * 0.27 * fh), (0.1 * fh, 0.042 * fh), axis)
        hand = _ellipse(shape, (sy + dy * 0.38 * fh, sx + dx * 0.38 * fh), (0.048 * fh, 0.048 * fh))
        layers.append((upper, SKIN if short_sleeves else CLOTH, skin_tone if short_sleeves else shirt))
        layers.append((fore | hand, SKIN, skin_tone))

    layers.append((_ellipse(shape, (top + 0.235 * fh, cx), (0.045 * fh, 0.05 * fh)), SKIN, skin_tone))
    hcy = top + 0.12 * fh
    head = _ellipse(shape, (hcy, cx), (0.09 * fh, 0.115 * fh))
    layers.append((head, SKIN, skin_tone))
    hair_cut = hcy - rng.uniform(0.03, 0.07) * fh
    yy = np.arange(shape[0])[:, None] + 0.5
    cap = _ellipse(shape, (hcy - 0.01 * fh, cx), (0.1 * fh, 0.125 * fh)) & (yy < hair_cut)
    layers.append((cap, CLOTH, hair))
    return layers


def _background(size, rng):
    base = rng.uniform(0.1, 0.9, size=3)
    ramp = rng.uniform(-0.25, 0.25, size=3)
    g = np.linspace(0.0, 1.0, size)
    direction = rng.random() < 0.5
    grad = g[:, None] if direction else g[None, :]
    img = base[None, None, :] + grad[..., None] * ramp[None, None, :]
    img = np.broadcast_to(img, (size, size, 3)).copy()
    for _ in range(rng.integers(0, 4)):
        y0, x0 = rng.integers(0, size, 2)
        hh, ww = rng.integers(size // 8, size // 2, 2)
        img[y0:y0 + hh, x0:x0 + ww] = rng.uniform(0.05, 0.95, size=3)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return img


def _skin_pixels(region, tone, rng):
    n = int(region.sum())
    shade = 1.0 - rng.uniform(0.0, SKIN_SHADE)
    noise = rng.uniform(-SKIN_NOISE, SKIN_NOISE, size=(n, 3))
    return tone[None, :] * shade + noise


def generate_scene(params: SceneParams, rng, return_info=False):
    """Render one scene.

    Returns ``(image, skin_mask, body_mask)``; with ``return_info`` a dict with
    the visible distractor blob regions, their mean tones and the lighting
    tint is appended.
    The image is float32 in [0, 1] and already quantised to 8-bit levels.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    size = params.image_size
    shape = (size, size)
    skin_pal = np.asarray(params.skin_tone_palette, dtype=np.float64)

    for _ in range(MAX_ATTEMPTS):
        labels = np.zeros(shape, dtype=np.uint8)
        img = _background(size, rng)
        k = int(rng.integers(1, params.n_figures + 1))
        fh = size * rng.uniform(0.75, 0.95) / (1.0 + 0.3 * (k - 1))
        slots = (np.arange(k) + 0.5) / k
        figures = []
        for j in range(k):
            cx = size * (slots[j] + rng.uniform(-0.08, 0.08))
            top = rng.uniform(-0.05, 0.25) * size
            tone = skin_pal[rng.integers(len(skin_pal))]
            figures.append((_figure(shape, rng, cx, top, fh, tone, params.clothing_palette), tone))

        body = np.zeros(shape, dtype=bool)
        for layers, _ in figures:
            for region, _, _ in layers:
                body |= region

        # distractors go under the figures, so only their visible part counts
        blobs = []
        n_blobs = int(math.floor(params.background_distractor_rate * 3 + rng.random()))
        for _ in range(n_blobs):
            for _ in range(20):
                r = size * rng.uniform(0.05, 0.12)
                c = rng.uniform(r, size - r, size=2)
                blob = _ellipse(shape, tuple(c), (r, r * rng.uniform(0.7, 1.3)), rng.uniform(0, math.pi)) & ~body
                if blob.sum() >= 4:
                    break
            else:
                continue
            # each pixel is its own convex mix of palette tones, so the blob stays in the palette hull
            w = rng.dirichlet(np.ones(len(skin_pal)))
            mix = rng.dirichlet(BLOB_CONCENTRATION * w + 1e-3, size=int(blob.sum()))
            img[blob] = mix @ skin_pal
            blobs.append({"region": blob, "tone": w @ skin_pal})

        for layers, tone in figures:
            for region, label, colour in layers:
                if not region.any():
                    continue
                labels[region] = label
                if label == SKIN:
                    img[region] = _skin_pixels(region, np.asarray(colour), rng)
                else:
                    img[region] = np.asarray(colour)[None, :] + rng.normal(0.0, 0.03, size=(int(region.sum()), 3))

        for b in blobs:
            b["region"] = b["region"] & (labels == BACKGROUND)
        blobs = [b for b in blobs if b["region"].sum() > 0]

        skin = labels == SKIN
        body = labels != BACKGROUND
        if skin.any() and (body & ~skin).any():
            break
    else:
        raise ValidationError(f"no valid figure placement after {MAX_ATTEMPTS} attempts")

    tint = np.ones(3)
    if params.lighting_tint_strength > 0:
        tint = 1.0 + params.lighting_tint_strength * rng.uniform(-0.5, 0.5, size=3)
        img = img * tint[None, None, :]
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    out = (img.astype(np.float32), skin.astype(np.uint8), body.astype(np.uint8))
    if return_info:
        return out + ({"blobs": blobs, "n_figures": len(figures), "tint": tint},)
    return out


def _save_png(arr, path):
    if arr.ndim == 3:
        Image.fromarray(np.round(arr * 255.0).astype(np.uint8), "RGB").save(path)
    else:
        Image.fromarray((arr * 255).astype(np.uint8), "L").save(path)


def label_counts(count, skin_label_fraction):
    """(n_skin, n_body) for a training split; rounds toward skin."""
    n_skin = int(math.ceil(count * skin_label_fraction - 1e-9))
    return n_skin, count - n_skin


def generate_dataset(params: SceneParams, count, skin_label_fraction, out_dir, val_count=None):
    """Write a synthetic dataset to ``out_dir``.

    Training samples keep exactly one mask; the validation slice keeps both.
    Produces ``train.jsonl`` and ``val.jsonl`` plus ``images/`` and ``masks/``.
    Returns a summary dict.
    """
    if count < 2:
        raise ConfigError("count must be at least 2")
    if not 0.0 < skin_label_fraction < 1.0:
        raise ConfigError("skin_label_fraction must be in (0, 1)")
    if val_count is None:
        val_count = max(2, count // 8)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc

    n_skin, n_body = label_counts(count, skin_label_fraction)
    order = np.random.default_rng([params.seed, 1]).permutation(count)
    keeps_skin = np.zeros(count, dtype=bool)
    keeps_skin[order[:n_skin]] = True

    seeds = np.random.SeedSequence(params.seed).spawn(count + val_count)
    train_lines, val_lines = [], []
    try:
        for i in range(count + val_count):
            is_val = i >= count
            sid = f"val_{i - count:04d}" if is_val else f"train_{i:04d}"
            image, skin, body = generate_scene(params, np.random.default_rng(seeds[i]))
            rec = {"id": sid, "image": f"images/{sid}.png"}
            _save_png(image, out / rec["image"])
            if is_val or keeps_skin[i]:
                rec["skin_mask"] = f"masks/{sid}_skin.png"
                _save_png(skin, out / rec["skin_mask"])
            if is_val or not keeps_skin[i]:
                rec["body_mask"] = f"masks/{sid}_body.png"
                _save_png(body, out / rec["body_mask"])
            (val_lines if is_val else train_lines).append(json.dumps(rec, sort_keys=True))
        (out / "train.jsonl").write_text("\n".join(train_lines) + "\n", encoding="utf-8")
        (out / "val.jsonl").write_text("\n".join(val_lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc}") from exc
    return {"train": count, "skin": n_skin, "body": n_body, "val": val_count, "dir": str(out)}
