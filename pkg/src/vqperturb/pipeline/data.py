"""Synthetic single-lesion images, augmentation and CutMix."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}
    id: int
    labeled: bool


def _ellipse(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    while True:
        a = rng.uniform(0.08, 0.25) * size
        b = rng.uniform(0.08, 0.25) * size
        cy = rng.uniform(0.2, 0.8) * size
        cx = rng.uniform(0.2, 0.8) * size
        th = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(th) + dy * math.sin(th)
        v = -dx * math.sin(th) + dy * math.cos(th)
        m = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if m.sum() >= 4:
            return m


def _make_sample(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size] / size
    gy, gx = rng.uniform(-0.15, 0.15, 2)
    background = rng.uniform(0.25, 0.45) + gy * (yy - 0.5) + gx * (xx - 0.5)
    mask = _ellipse(size, rng)
    # dimmer, lesion-free blob: an unlabeled-looking distractor
    distractor = _ellipse(size, rng) & ~mask
    contrast = rng.uniform(0.2, 0.45)
    img = background + contrast * mask + 0.5 * contrast * distractor
    img = img + rng.normal(0.0, 0.08, (size, size))
    return np.clip(img, 0.0, 1.0), mask.astype(np.int64)


def gen_synthetic_dataset(n: int, size: int = 32, seed: int = 0,
                          labeled_ratio: float = 0.1) -> list[SyntheticSample]:
    """``n`` noisy images with one bright ellipse each; the first ceil(ratio * n) are labeled."""
    if n < 4 or size < 16:
        raise ValueError(f"need n >= 4 and size >= 16, got n={n}, size={size}")
    rng = np.random.default_rng(seed)
    n_lab = math.ceil(labeled_ratio * n)
    out = []
    for i in range(n):
        img, mask = _make_sample(size, rng)
        out.append(SyntheticSample(img, mask, i, i < n_lab))
    return out


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1, H, W) images and (N, H, W) masks."""
    return (np.stack([s.image for s in samples])[:, None].astype(np.float64),
            np.stack([s.mask for s in samples]).astype(np.int64))


def weak_augment(images: np.ndarray, masks: np.ndarray, rng: np.random.Generator):
    """Random 90-degree rotation (images and masks) and intensity jitter (images only).

    Returns (images, masks, quarter_turns).
    """
    imgs, ms, ks = [], [], []
    for x, m in zip(images, masks):
        k = int(rng.integers(4))
        gain = rng.uniform(0.9, 1.1)
        shift = rng.uniform(-0.05, 0.05)
        imgs.append(np.clip(np.rot90(x, k, axes=(1, 2)) * gain + shift, 0.0, 1.0))
        ms.append(np.rot90(m, k))
        ks.append(k)
    return (np.ascontiguousarray(np.stack(imgs)), np.ascontiguousarray(np.stack(ms)),
            np.array(ks, dtype=np.int64))


def cutmix_box(h: int, w: int, area: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Rectangle (top, left, height, width) covering roughly ``area`` of the image."""
    if area <= 0:
        return 0, 0, 0, 0
    if area >= 1:
        return 0, 0, h, w
    ratio = rng.uniform(0.5, 2.0)
    bh = min(h, max(1, int(round(math.sqrt(area * h * w * ratio)))))
    bw = min(w, max(1, int(round(area * h * w / bh))))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def cutmix_pair(x1, x2, y1, y2, seed: int, area: float | None = None,
                area_range: tuple[float, float] = (0.1, 0.4)):
    """Paste a rectangle of sample 2 into sample 1; labels are mixed with the same rectangle.

    Arrays are (..., H, W). ``area`` overrides the uniform draw from ``area_range``.
    """
    x1, x2, y1, y2 = (np.asarray(a) for a in (x1, x2, y1, y2))
    if x1.shape != x2.shape or y1.shape != y2.shape or x1.shape[-2:] != y1.shape[-2:]:
        raise ValueError("cutmix_pair: inputs must share spatial shapes")
    rng = np.random.default_rng(seed)
    if area is None:
        area = rng.uniform(*area_range)
    h, w = x1.shape[-2:]
    top, left, bh, bw = cutmix_box(h, w, area, rng)
    xa, ya = x1.copy(), y1.copy()
    xa[..., top:top + bh, left:left + bw] = x2[..., top:top + bh, left:left + bw]
    ya[..., top:top + bh, left:left + bw] = y2[..., top:top + bh, left:left + bw]
    return xa, ya, (top, left, bh, bw)
