"""Prompt-centered cropping.

The model never sees the click coordinates as numbers.  Instead the
input is re-framed so the clicked pixel lands exactly at the crop
center (side//2, side//2); the crop window itself is the prompt
encoding.  Regions falling outside the source image are zero-filled,
and ``uncrop_mask`` maps a predicted crop-frame mask back into the
original frame for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class PromptPoint:
    """A click at row y, column x in original-image coordinates."""

    y: int
    x: int


@dataclass(frozen=True)
class CropSpec:
    """Geometry linking a crop back to its source frame.

    origin_y/origin_x locate crop pixel (0,0) in the original image and
    may be negative when the window hangs off the top/left edge.
    """

    origin_y: int
    origin_x: int
    side: int
    original_h: int
    original_w: int


def crop_centered(image: Tensor, point: PromptPoint, side: int) -> tuple[Tensor, CropSpec]:
    """Cut a side x side window centered on the prompt point.

    Works on any [1,C,H,W] tensor so the same routine crops images,
    masks, and teacher maps identically.  Out-of-bounds area is zeros.
    """
    if len(image.shape) != 4 or image.shape[0] != 1:
        raise ShapeError(f"crop_centered expects [1,C,H,W], got {image.shape}")
    if side < 2 or side % 2 != 0:
        raise DomainError(f"crop side must be a positive even integer, got {side}")
    _, c, h, w = image.shape
    if not (0 <= point.y < h and 0 <= point.x < w):
        raise DomainError(
            f"prompt point ({point.y},{point.x}) outside image of size {h}x{w}"
        )
    half = side // 2
    oy = point.y - half
    ox = point.x - half
    out = np.zeros((1, c, side, side), dtype=image.data.dtype)
    # overlap of [oy, oy+side) x [ox, ox+side) with the image bounds
    src_y0, src_y1 = max(oy, 0), min(oy + side, h)
    src_x0, src_x1 = max(ox, 0), min(ox + side, w)
    if src_y0 < src_y1 and src_x0 < src_x1:
        dst_y0 = src_y0 - oy
        dst_x0 = src_x0 - ox
        out[:, :, dst_y0 : dst_y0 + (src_y1 - src_y0), dst_x0 : dst_x0 + (src_x1 - src_x0)] = (
            image.data[:, :, src_y0:src_y1, src_x0:src_x1]
        )
    spec = CropSpec(origin_y=oy, origin_x=ox, side=side, original_h=h, original_w=w)
    return Tensor(out), spec


def uncrop_mask(mask: Tensor, spec: CropSpec) -> Tensor:
    """Paste a crop-frame mask back into a zeroed original-size frame.

    Pixels of the crop that fell outside the original bounds are
    dropped; everything else is copied bit-exactly.
    """
    if len(mask.shape) != 4 or mask.shape[0] != 1 or mask.shape[1] != 1:
        raise ShapeError(f"uncrop_mask expects [1,1,side,side], got {mask.shape}")
    if mask.shape[2] != spec.side or mask.shape[3] != spec.side:
        raise ShapeError(
            f"mask spatial size {mask.shape[2]}x{mask.shape[3]} does not match "
            f"crop side {spec.side}"
        )
    h, w = spec.original_h, spec.original_w
    out = np.zeros((1, 1, h, w), dtype=mask.data.dtype)
    src_y0, src_y1 = max(spec.origin_y, 0), min(spec.origin_y + spec.side, h)
    src_x0, src_x1 = max(spec.origin_x, 0), min(spec.origin_x + spec.side, w)
    if src_y0 < src_y1 and src_x0 < src_x1:
        cy0 = src_y0 - spec.origin_y
        cx0 = src_x0 - spec.origin_x
        out[:, :, src_y0:src_y1, src_x0:src_x1] = mask.data[
            :, :, cy0 : cy0 + (src_y1 - src_y0), cx0 : cx0 + (src_x1 - src_x0)
        ]
    return Tensor(out)
