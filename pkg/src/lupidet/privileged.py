"""Privileged-channel encoding: ground-truth boxes as a grayscale mask plane.

Each class gets a distinct shade; the mask is the extra input plane the
teacher sees and the student never does. Shades are quantized to the 8-bit
grid so masks survive PGM round trips exactly.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .core import Annotation, ImagePlane, ImageSample


def class_shade(class_id: int, num_classes: int) -> float:
    """Shade in (0, 1] for a class: (k+1)/C quantized to the 8-bit grid.

    Rounding is half-away-from-zero, so e.g. 255/6 = 42.5 maps to 43.
    Monotone in k, hence decodable, and all shades are distinct for any
    C <= 255. The binary-detection case C=1 yields a pure 0/1 mask.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if not (0 <= class_id < num_classes):
        raise ValueError(f"class_id {class_id} out of range for {num_classes} classes")
    return math.floor(255.0 * (class_id + 1) / num_classes + 0.5) / 255.0


def shade_to_class(value: float, num_classes: int) -> int:
    """Recover the class id from a nonzero mask value: round(v*C) - 1."""
    if value <= 0.0:
        raise ValueError(f"cannot decode a background value {value}")
    k = math.floor(value * num_classes + 0.5) - 1
    if not (0 <= k < num_classes):
        raise ValueError(f"value {value} does not decode to a valid class of {num_classes}")
    return k


def encode_mask(
    annotations: tuple[Annotation, ...] | list[Annotation],
    width: int,
    height: int,
    num_classes: int,
) -> ImagePlane:
    """Rasterize boxes into a mask plane using the pixel-center rule.

    A pixel (px, py) is covered by a box when x_min <= px+0.5 < x_max and
    y_min <= py+0.5 < y_max. Overlaps resolve to the maximum shade, which
    makes the result independent of annotation order.
    """
    mask = np.zeros((height, width), dtype=np.float64)
    for ann in annotations:
        b = ann.box
        x0 = max(0, math.ceil(b.x_min - 0.5))
        x1 = min(width, math.ceil(b.x_max - 0.5))
        y0 = max(0, math.ceil(b.y_min - 0.5))
        y1 = min(height, math.ceil(b.y_max - 0.5))
        if x0 >= x1 or y0 >= y1:
            continue
        shade = class_shade(ann.class_id, num_classes)
        region = mask[y0:y1, x0:x1]
        np.maximum(region, shade, out=region)
    return ImagePlane(mask)


def attach_privileged_channel(sample: ImageSample, num_classes: int) -> ImageSample:
    """Return the sample with its ground-truth mask attached as the privileged plane."""
    if sample.privileged is not None:
        raise ValueError(f"sample {sample.id!r} already carries a privileged plane")
    mask = encode_mask(sample.annotations, sample.width, sample.height, num_classes)
    return replace(sample, privileged=mask)


def mask_to_uint8(mask: ImagePlane) -> np.ndarray:
    """8-bit view of a mask plane for PGM persistence; exact for shade values."""
    return np.floor(mask.values * 255.0 + 0.5).astype(np.uint8)
