"""Grid tiling with annotation clipping, and bilinear resizing with box rescaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Annotation, BoundingBox, ImagePlane, ImageSample, box_area, clip_box


@dataclass(frozen=True)
class TileSpec:
    """K x K grid tiling policy.

    A clipped annotation is kept only when at least `min_visibility` of its
    original area survives and both clipped sides are at least `min_side_px`;
    this keeps sliver boxes out of the training targets.
    """

    grid: int = 3
    min_visibility: float = 0.25
    min_side_px: float = 2.0

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError(f"grid must be >= 1, got {self.grid}")
        if not (0.0 < self.min_visibility <= 1.0):
            raise ValueError(f"min_visibility must lie in (0, 1], got {self.min_visibility}")
        if self.min_side_px <= 0:
            raise ValueError(f"min_side_px must be positive, got {self.min_side_px}")


def _partition(size: int, k: int) -> list[tuple[int, int]]:
    # floor-partition; the last cell absorbs the remainder
    step = size // k
    edges = [(i * step, (i + 1) * step) for i in range(k - 1)]
    edges.append(((k - 1) * step, size))
    return edges


def tile_image(sample: ImageSample, spec: TileSpec) -> list[ImageSample]:
    """Split a sample into K*K tiles in row-major order.

    Pixel content is an exact crop (no resampling). Each annotation is
    clipped against every tile; survivors are re-expressed in tile-local
    coordinates. Tile ids are suffixed "_r{row}_c{col}". Masks are generated
    after tiling, so the input must not carry a privileged plane yet.
    """
    k = spec.grid
    if sample.privileged is not None:
        raise ValueError("tile_image expects samples without a privileged plane")
    if sample.width < k or sample.height < k:
        raise ValueError(
            f"image {sample.width}x{sample.height} smaller than {k}x{k} grid"
        )
    cols = _partition(sample.width, k)
    rows = _partition(sample.height, k)

    tiles = []
    for r, (y0, y1) in enumerate(rows):
        for c, (x0, x1) in enumerate(cols):
            region = BoundingBox(x0, y0, x1, y1)
            kept = []
            for ann in sample.annotations:
                clipped = clip_box(ann.box, region)
                if clipped is None:
                    continue
                if box_area(clipped) / box_area(ann.box) < spec.min_visibility:
                    continue
                if clipped.width < spec.min_side_px or clipped.height < spec.min_side_px:
                    continue
                kept.append(Annotation(
                    box=BoundingBox(clipped.x_min - x0, clipped.y_min - y0,
                                    clipped.x_max - x0, clipped.y_max - y0),
                    class_id=ann.class_id,
                ))
            planes = tuple(ImagePlane(p.values[y0:y1, x0:x1].copy()) for p in sample.rgb)
            tiles.append(ImageSample(
                id=f"{sample.id}_r{r}_c{c}",
                rgb=planes,
                annotations=tuple(kept),
            ))
    return tiles


def _resize_plane(values: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and clamped borders."""
    in_h, in_w = values.shape
    if (out_w, out_h) == (in_w, in_h):
        return values.copy()
    sx = in_w / out_w
    sy = in_h / out_h
    # source coordinates of output pixel centers
    xs = (np.arange(out_w) + 0.5) * sx - 0.5
    ys = (np.arange(out_h) + 0.5) * sy - 0.5
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    top = values[y0c][:, x0c] * (1 - fx) + values[y0c][:, x1c] * fx
    bot = values[y1c][:, x0c] * (1 - fx) + values[y1c][:, x1c] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def resize_sample(sample: ImageSample, out_w: int, out_h: int) -> ImageSample:
    """Bilinearly resize every plane; scale annotation boxes to match.

    Boxes whose either side falls below 1 px after scaling are dropped.
    Identity dimensions return a pixel-identical sample.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dims must be >= 1, got {out_w}x{out_h}")
    sx = out_w / sample.width
    sy = out_h / sample.height
    kept = []
    for ann in sample.annotations:
        b = ann.box
        scaled = BoundingBox(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)
        if scaled.width < 1.0 or scaled.height < 1.0:
            continue
        kept.append(Annotation(box=scaled, class_id=ann.class_id))
    planes = tuple(ImagePlane(_resize_plane(p.values, out_w, out_h)) for p in sample.rgb)
    privileged = sample.privileged
    if privileged is not None:
        privileged = ImagePlane(_resize_plane(privileged.values, out_w, out_h))
    return ImageSample(
        id=sample.id, rgb=planes, annotations=tuple(kept), privileged=privileged,
    )
