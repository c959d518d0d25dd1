"""Geometric primitives, annotation types, and the dataset container.

Everything here is immutable after construction and all operations are pure,
so the types are safe to share across threads and processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VALID_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in continuous pixel coordinates, origin top-left.

    Corner form (x_min, y_min, x_max, y_max). Degenerate (zero-area) boxes
    are rejected at construction: they poison IoU denominators downstream.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = tuple(float(c) for c in (self.x_min, self.y_min, self.x_max, self.y_max))
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (coords[0] < coords[2] and coords[1] < coords[3]):
            raise ValueError(f"degenerate box {coords}: need x_min < x_max and y_min < y_max")
        object.__setattr__(self, "x_min", coords[0])
        object.__setattr__(self, "y_min", coords[1])
        object.__setattr__(self, "x_max", coords[2])
        object.__setattr__(self, "y_max", coords[3])

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_xywh(self) -> list[float]:
        """COCO-style [x, y, width, height]."""
        return [self.x_min, self.y_min, self.width, self.height]


@dataclass(frozen=True)
class Annotation:
    """A ground-truth box together with its class index."""

    box: BoundingBox
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class Detection:
    """A scored prediction in the same space as annotations."""

    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def box_area(b: BoundingBox) -> float:
    """Area of a valid box; always positive."""
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (box_area(a) + box_area(b) - inter)


def clip_box(b: BoundingBox, region: BoundingBox) -> BoundingBox | None:
    """Intersection rectangle of `b` with `region`, or None when it has zero area."""
    x0 = max(b.x_min, region.x_min)
    y0 = max(b.y_min, region.y_min)
    x1 = min(b.x_max, region.x_max)
    y1 = min(b.y_max, region.y_max)
    if x0 >= x1 or y0 >= y1:
        return None
    return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class ImagePlane:
    """Single raster plane, row-major float64, shape (height, width)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"plane must be a non-empty 2-D array, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("plane contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ImageSample:
    """One image: three RGB planes, optional privileged plane, annotations.

    The privileged plane is the extra input channel given only to the
    teacher; it must match the RGB planes' dimensions and lie in [0, 1].
    """

    id: str
    rgb: tuple[ImagePlane, ImagePlane, ImagePlane]
    annotations: tuple[Annotation, ...] = ()
    privileged: ImagePlane | None = None

    def __post_init__(self):
        rgb = tuple(self.rgb)
        if len(rgb) != 3:
            raise ValueError(f"expected exactly 3 rgb planes, got {len(rgb)}")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "annotations", tuple(self.annotations))
        w, h = rgb[0].width, rgb[0].height
        for plane in rgb[1:]:
            if plane.width != w or plane.height != h:
                raise ValueError(f"rgb planes of sample {self.id!r} disagree on dimensions")
        if self.privileged is not None:
            p = self.privileged
            if p.width != w or p.height != h:
                raise ValueError(f"privileged plane of sample {self.id!r} disagrees on dimensions")
            if p.values.min() < 0.0 or p.values.max() > 1.0:
                raise ValueError(f"privileged plane of sample {self.id!r} must lie in [0, 1]")
        for ann in self.annotations:
            b = ann.box
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise ValueError(
                    f"annotation box {b} of sample {self.id!r} exceeds image bounds {w}x{h}"
                )

    @property
    def width(self) -> int:
        return self.rgb[0].width

    @property
    def height(self) -> int:
        return self.rgb[0].height


@dataclass(frozen=True)
class Dataset:
    """A list of samples plus the category table for one split."""

    samples: tuple[ImageSample, ...]
    categories: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.split not in VALID_SPLITS:
            raise ValueError(f"split must be one of {VALID_SPLITS}, got {self.split!r}")
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r} in split {self.split!r}")
            seen.add(s.id)
            for ann in s.annotations:
                if ann.class_id >= len(self.categories):
                    raise ValueError(
                        f"sample {s.id!r} references class {ann.class_id} but only "
                        f"{len(self.categories)} categories exist"
                    )

    @property
    def num_classes(self) -> int:
        return len(self.categories)
