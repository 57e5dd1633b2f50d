"""Procedural 11-class image set: coloured shapes and textures.

Each class is one pattern family; colours, frequencies, phases, positions and
sizes are randomised per image, and mild pixel noise is added, so the task is
learnable but not trivial.
"""

from pathlib import Path

import numpy as np
from PIL import Image

# Class directory names borrowed from the cooking-state taxonomy; the patterns
# themselves are arbitrary stand-ins.
STATE_NAMES = ("creamy_paste", "diced", "floured", "grated", "juiced", "julienne",
               "mixed", "other", "peeled", "sliced", "whole")


def _stripes(rr, cc, rng, axis):
    period = rng.uniform(5, 10)
    phase = rng.uniform(0, 2 * np.pi)
    coord = rr if axis == 0 else cc
    return np.sin(2 * np.pi * coord / period + phase) > 0


def _checker(rr, cc, rng):
    cell = rng.integers(5, 10)
    off = rng.integers(0, cell, size=2)
    return ((rr + off[0]) // cell + (cc + off[1]) // cell) % 2 == 0


def _dots(rr, cc, rng):
    gap = rng.uniform(8, 12)
    radius = gap * rng.uniform(0.2, 0.3)
    off = rng.uniform(0, gap, size=2)
    dy = (rr + off[0]) % gap - gap / 2
    dx = (cc + off[1]) % gap - gap / 2
    return dy**2 + dx**2 < radius**2


def _center_radius(size, rng, lo=0.2, hi=0.32):
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    return cy, cx, rng.uniform(lo, hi) * size


def _disk(rr, cc, rng, size):
    cy, cx, r = _center_radius(size, rng)
    return (rr - cy) ** 2 + (cc - cx) ** 2 < r**2


def _ring(rr, cc, rng, size):
    cy, cx, r = _center_radius(size, rng)
    d = np.sqrt((rr - cy) ** 2 + (cc - cx) ** 2)
    return np.abs(d - r) < max(2.0, 0.06 * size)


def _square(rr, cc, rng, size):
    cy, cx, r = _center_radius(size, rng)
    return (np.abs(rr - cy) < r) & (np.abs(cc - cx) < r)


def _cross(rr, cc, rng, size):
    cy, cx, r = _center_radius(size, rng, 0.28, 0.4)
    arm = max(2.0, 0.08 * size)
    vertical = (np.abs(cc - cx) < arm) & (np.abs(rr - cy) < r)
    horizontal = (np.abs(rr - cy) < arm) & (np.abs(cc - cx) < r)
    return vertical | horizontal


def _triangle(rr, cc, rng, size):
    cy, cx, r = _center_radius(size, rng, 0.25, 0.38)
    top = cy - r
    height = 2 * r
    inside_rows = (rr >= top) & (rr <= top + height)
    half_width = (rr - top) / height * r
    return inside_rows & (np.abs(cc - cx) <= half_width)


def _blobs(rr, cc, rng, size):
    coarse = rng.standard_normal((6, 6))
    img = Image.fromarray(coarse.astype(np.float32), mode="F").resize((size, size), Image.Resampling.BICUBIC)
    field = np.asarray(img)
    return field > np.median(field)


def _grid(rr, cc, rng):
    gap = rng.integers(8, 13)
    width = max(1, gap // 5)
    off = rng.integers(0, gap, size=2)
    return ((rr + off[0]) % gap < width) | ((cc + off[1]) % gap < width)


def _pattern(cid, rr, cc, rng, size):
    if cid == 0:
        return _stripes(rr, cc, rng, 0)
    if cid == 1:
        return _stripes(rr, cc, rng, 1)
    if cid == 2:
        return _checker(rr, cc, rng)
    if cid == 3:
        return _dots(rr, cc, rng)
    if cid == 4:
        return _disk(rr, cc, rng, size)
    if cid == 5:
        return _ring(rr, cc, rng, size)
    if cid == 6:
        return _square(rr, cc, rng, size)
    if cid == 7:
        return _cross(rr, cc, rng, size)
    if cid == 8:
        return _triangle(rr, cc, rng, size)
    if cid == 9:
        return _blobs(rr, cc, rng, size)
    return _grid(rr, cc, rng)


NUM_PATTERNS = 11


def render(cid, size, rng, noise=12.0):
    """One uint8 (size, size, 3) image of pattern family ``cid``."""
    if not 0 <= cid < NUM_PATTERNS:
        raise ValueError(f"pattern id must be in [0, {NUM_PATTERNS})")
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = _pattern(cid, rr, cc, rng, size)
    fg = rng.uniform(0, 255, size=3)
    bg = rng.uniform(0, 255, size=3)
    # keep foreground and background apart so the shape is always visible
    while np.abs(fg - bg).sum() < 180:
        bg = rng.uniform(0, 255, size=3)
    img = np.where(mask[..., None], fg, bg) + rng.normal(0, noise, size=(size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_images(num_classes=11, per_class=50, size=64, seed=0):
    """Balanced set of ``num_classes * per_class`` images and their labels."""
    if not 1 <= num_classes <= NUM_PATTERNS:
        raise ValueError(f"num_classes must be in [1, {NUM_PATTERNS}]")
    images, labels = [], []
    for cid in range(num_classes):
        for i in range(per_class):
            rng = np.random.default_rng([seed, cid, i])
            images.append(render(cid, size, rng))
            labels.append(cid)
    return np.stack(images), np.array(labels, dtype=np.int64)


def class_names(num_classes=11):
    if num_classes <= len(STATE_NAMES):
        return list(STATE_NAMES[:num_classes])
    return [f"class_{i:02d}" for i in range(num_classes)]


def write_image_folder(root, num_classes=11, per_class=50, size=64, seed=0):
    """Render the synthetic set as PNGs, one directory per class."""
    root = Path(root)
    images, labels = make_images(num_classes, per_class, size, seed)
    names = class_names(num_classes)
    for name in names:
        (root / name).mkdir(parents=True, exist_ok=True)
    counters = [0] * num_classes
    for img, cid in zip(images, labels):
        Image.fromarray(img).save(root / names[cid] / f"{counters[cid]:04d}.png")
        counters[cid] += 1
    return root
