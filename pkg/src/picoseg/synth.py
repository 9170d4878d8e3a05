"""Synthetic shapes dataset with a built-in soft teacher.

Each sample directory holds:

    image.ppm    uniform-noise RGB background with 1-3 solid convex
                 shapes (disks / axis-aligned rectangles), no anti-aliasing
    mask.pgm     the target shape (always the last one drawn, so it is
                 never occluded), values {0,255}
    prompt.txt   "x y" click at the target centroid
    teacher.ptsr soft logits in the crop frame: logit(clip(boxblur3(
                 crop(mask)), 1e-4, 1-1e-4)) as float32 [1,1,S,S]

The teacher is confident and consistent with the ground truth except in
a 1-2 pixel boundary band, which is what the blur is for.  Generation is
a pure function of (seed, count, sizes): running twice produces
byte-identical directories.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DomainError
from .fileio import save_pgm, save_ppm, save_tensor
from .prompt import PromptPoint, crop_centered
from .tensor import Tensor

MIN_SHAPE = 6
MAX_SHAPE = 22


def _box_blur3(a: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 mean filter."""
    p = np.pad(a.astype(np.float64), 1)
    out = np.zeros_like(a, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += p[dy : dy + a.shape[0], dx : dx + a.shape[1]]
    return out / 9.0


def teacher_logits_for_mask(mask: Tensor, point: PromptPoint, crop_size: int) -> Tensor:
    """Soft teacher in the crop frame, derived from the ground truth."""
    crop, _ = crop_centered(mask, point, crop_size)
    p = np.clip(_box_blur3(crop.data[0, 0]), 1e-4, 1.0 - 1e-4)
    return Tensor(np.log(p / (1.0 - p)).astype(np.float32)[None, None])


def _draw_shape(rng: np.random.Generator, img: np.ndarray, max_half: int) -> np.ndarray:
    """Draw one random solid shape in place; returns its boolean mask."""
    h, w = img.shape[:2]
    hi = min(MAX_SHAPE, max_half)
    color = rng.integers(0, 256, 3)
    if rng.random() < 0.5:
        r = int(rng.integers(MIN_SHAPE, hi + 1))
        cy = int(rng.integers(r, h - r))
        cx = int(rng.integers(r, w - r))
        yy, xx = np.ogrid[:h, :w]
        shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        ry = int(rng.integers(MIN_SHAPE, hi + 1))
        rx = int(rng.integers(MIN_SHAPE, hi + 1))
        cy = int(rng.integers(ry, h - ry))
        cx = int(rng.integers(rx, w - rx))
        shape = np.zeros((h, w), dtype=bool)
        shape[cy - ry : cy + ry + 1, cx - rx : cx + rx + 1] = True
    img[shape] = color
    return shape


def _centroid(mask: np.ndarray) -> PromptPoint:
    ys, xs = np.nonzero(mask)
    return PromptPoint(y=int(round(float(ys.mean()))), x=int(round(float(xs.mean()))))


def generate_sample(rng: np.random.Generator, image_size: int, crop_size: int):
    """One (image, target mask, prompt, teacher) tuple from the stream."""
    h = w = image_size
    img = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    # shapes must fit inside the crop window with a small margin
    max_half = crop_size // 2 - 4
    n = int(rng.integers(1, 4))
    shape = None
    for _ in range(n):
        shape = _draw_shape(rng, img, max_half)
    point = _centroid(shape)
    image = Tensor(img.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
    mask = Tensor(shape[None, None].astype(np.float32))
    teacher = teacher_logits_for_mask(mask, point, crop_size)
    return image, mask, point, teacher


def synth_shapes_dataset(out_dir: str, count: int, seed: int,
                         image_size: int = 96, crop_size: int = 64) -> list[str]:
    """Write ``count`` sample directories under ``out_dir``; returns paths."""
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    if crop_size < 16 or crop_size % 2:
        raise DomainError(f"crop_size must be even and >= 16, got {crop_size}")
    if image_size < crop_size // 2 + MIN_SHAPE * 2:
        raise DomainError(f"image_size {image_size} too small for crop {crop_size}")
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    dirs = []
    for i in range(count):
        image, mask, point, teacher = generate_sample(rng, image_size, crop_size)
        d = os.path.join(out_dir, f"sample_{i:05d}")
        os.makedirs(d, exist_ok=True)
        save_ppm(image, os.path.join(d, "image.ppm"))
        save_pgm(mask, os.path.join(d, "mask.pgm"))
        with open(os.path.join(d, "prompt.txt"), "w", encoding="utf-8") as f:
            f.write(f"{point.x} {point.y}\n")
        save_tensor(teacher, os.path.join(d, "teacher.ptsr"))
        dirs.append(d)
    return dirs
