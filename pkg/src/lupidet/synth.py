"""Deterministic synthetic detection dataset ("synthlitter").

Small shape archetypes (one per class) are scattered over a value-noise
background; some are partially overdrawn with background-colored patches to
mimic litter hidden by grass or stones. Class identity correlates with
shape and, weakly, with intensity, so the RGB task is genuinely hard while
the ground-truth mask makes it trivial for a privileged model.

Generation uses a single seeded RNG stream in fixed draw order: equal seeds
produce byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Annotation, BoundingBox, Dataset, ImagePlane, ImageSample, iou
from .ingest import (
    CocoAnnotation,
    CocoCategory,
    CocoImage,
    CocoManifest,
    normalize_image,
    serialize_coco,
    write_pgm,
    write_ppm,
    write_split_map,
)
from .privileged import class_shade

SHAPE_NAMES = ("disc", "square", "triangle", "ring", "cross", "bar")

# weak per-class channel tints; the strong cue is shape, not color
_CLASS_TINTS = (
    (1.10, 0.94, 0.94),
    (0.94, 1.10, 0.94),
    (0.94, 0.94, 1.10),
    (1.07, 1.07, 0.90),
    (1.07, 0.90, 1.07),
    (0.90, 1.07, 1.07),
)


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 20
    image_size: int = 192
    num_classes: int = 6
    objects_min: int = 1
    objects_max: int = 4
    side_min: float = 8.0
    side_max: float = 24.0
    occlusion_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if not (1 <= self.num_classes <= len(SHAPE_NAMES)):
            raise ValueError(f"num_classes must lie in [1, {len(SHAPE_NAMES)}]")
        if not (1 <= self.objects_min <= self.objects_max):
            raise ValueError("objects range must satisfy 1 <= min <= max")
        if not (2.0 <= self.side_min <= self.side_max):
            raise ValueError("side range must satisfy 2 <= min <= max")
        if self.side_max >= self.image_size / 2:
            raise ValueError("side_max must be below image_size / 2")
        if not (0.0 <= self.occlusion_rate <= 1.0):
            raise ValueError("occlusion_rate must lie in [0, 1]")


@dataclass
class SynthResult:
    manifest: CocoManifest
    split_map: dict[str, list[int]]
    rasters: dict[int, np.ndarray]  # image id -> (H, W, 3) uint8
    datasets: dict[str, Dataset]


def _value_noise(rng: np.random.Generator, size: int, step: int) -> np.ndarray:
    """Bilinear interpolation of a random lattice; values in [0, 1]."""
    cells = size // step + 2
    lattice = rng.uniform(0.0, 1.0, size=(cells, cells))
    ys = (np.arange(size) / step)
    xs = (np.arange(size) / step)
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _shape_mask(name: str, w: float, h: float, x0: float, y0: float) -> np.ndarray:
    """Boolean pixel-center coverage of one archetype inside its bbox."""
    px0 = max(0, math.floor(x0))
    py0 = max(0, math.floor(y0))
    px1 = math.ceil(x0 + w)
    py1 = math.ceil(y0 + h)
    xs = np.arange(px0, px1) + 0.5
    ys = np.arange(py0, py1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    cx = x0 + w / 2
    cy = y0 + h / 2
    inside_box = (gx >= x0) & (gx < x0 + w) & (gy >= y0) & (gy < y0 + h)
    if name == "disc":
        rho = ((gx - cx) / (w / 2)) ** 2 + ((gy - cy) / (h / 2)) ** 2
        m = rho <= 1.0
    elif name == "square" or name == "bar":
        m = inside_box
    elif name == "triangle":
        # apex top-center, base along the bottom edge
        m = inside_box & (np.abs(gx - cx) <= (gy - y0) / h * (w / 2))
    elif name == "ring":
        rho = ((gx - cx) / (w / 2)) ** 2 + ((gy - cy) / (h / 2)) ** 2
        m = (rho <= 1.0) & (rho >= 0.55 ** 2)
    elif name == "cross":
        m = inside_box & ((np.abs(gx - cx) <= 0.17 * w) | (np.abs(gy - cy) <= 0.17 * h))
    else:
        raise ValueError(f"unknown shape {name!r}")
    return m & inside_box, px0, py0


def _render_image(rng: np.random.Generator, cfg: SynthConfig):
    """One image: returns (uint8 raster, annotations). Fixed rng draw order."""
    size = cfg.image_size
    coarse = _value_noise(rng, size, 24)
    fine = _value_noise(rng, size, 8)
    lum = 50.0 + 120.0 * (0.65 * coarse + 0.35 * fine)
    tints = rng.uniform(-10.0, 10.0, size=3)
    gains = (0.96, 1.0, 0.92)
    canvas = np.stack(
        [np.clip(lum * gains[c] + tints[c], 0.0, 255.0) for c in range(3)],
        axis=2,
    )
    background = canvas.copy()

    annotations: list[Annotation] = []
    boxes: list[BoundingBox] = []
    n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    for _ in range(n_objects):
        k = int(rng.integers(cfg.num_classes))
        name = SHAPE_NAMES[k]
        if name == "bar":
            h = float(rng.uniform(cfg.side_min, cfg.side_min + 0.25 * (cfg.side_max - cfg.side_min)))
            w = float(min(cfg.side_max, h * rng.uniform(1.9, 2.5)))
        else:
            w = float(rng.uniform(cfg.side_min, cfg.side_max))
            h = float(np.clip(w * rng.uniform(0.85, 1.18), cfg.side_min, cfg.side_max))
        box = None
        for attempt in range(20):
            x0 = float(rng.uniform(1.0, size - 1.0 - w))
            y0 = float(rng.uniform(1.0, size - 1.0 - h))
            candidate = BoundingBox(x0, y0, x0 + w, y0 + h)
            if all(iou(candidate, b) <= 0.3 for b in boxes) or attempt == 19:
                box = candidate
                break
        boxes.append(box)

        base_lum = 105.0 + 24.0 * k + float(rng.uniform(-18.0, 18.0))
        tint = _CLASS_TINTS[k]
        mask, px0, py0 = _shape_mask(name, w, h, box.x_min, box.y_min)
        ys, xs = np.nonzero(mask)
        for c in range(3):
            canvas[py0 + ys, px0 + xs, c] = np.clip(base_lum * tint[c], 0.0, 255.0)

        if rng.uniform() < cfg.occlusion_rate:
            # background-colored patch over <= 40% of the bbox
            pw = w * float(rng.uniform(0.30, 0.63))
            ph = h * float(rng.uniform(0.30, 0.63))
            ox = box.x_min + float(rng.uniform(0.0, w - pw))
            oy = box.y_min + float(rng.uniform(0.0, h - ph))
            qx0 = max(0, math.floor(ox))
            qy0 = max(0, math.floor(oy))
            qx1 = min(size, math.ceil(ox + pw))
            qy1 = min(size, math.ceil(oy + ph))
            canvas[qy0:qy1, qx0:qx1] = background[qy0:qy1, qx0:qx1]

        annotations.append(Annotation(box=box, class_id=k))
    return np.floor(canvas + 0.5).astype(np.uint8), annotations


def _split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(math.floor(0.7 * n))
    n_val = int(math.floor(0.15 * n))
    return n_train, n_val, n - n_train - n_val


def generate_dataset(cfg: SynthConfig) -> SynthResult:
    """Generate rasters, annotations, the manifest, and split assignment."""
    rng = np.random.default_rng(cfg.seed)
    rasters: dict[int, np.ndarray] = {}
    per_image: dict[int, list[Annotation]] = {}
    images = []
    coco_annotations = []
    ann_id = 1
    for i in range(cfg.num_images):
        image_id = i + 1
        raster, annotations = _render_image(rng, cfg)
        rasters[image_id] = raster
        per_image[image_id] = annotations
        images.append(CocoImage(
            id=image_id, file_name=f"img_{image_id:04d}.ppm",
            width=cfg.image_size, height=cfg.image_size,
        ))
        for ann in annotations:
            coco_annotations.append(CocoAnnotation(
                id=ann_id, image_id=image_id,
                category_id=ann.class_id + 1,
                bbox=tuple(ann.box.as_xywh()),
            ))
            ann_id += 1
    categories = tuple(
        CocoCategory(id=k + 1, name=SHAPE_NAMES[k]) for k in range(cfg.num_classes)
    )
    manifest = CocoManifest(tuple(images), tuple(coco_annotations), categories)

    perm = rng.permutation(cfg.num_images)
    n_train, n_val, _ = _split_counts(cfg.num_images)
    ids = [int(i) + 1 for i in perm]
    split_map = {
        "train": sorted(ids[:n_train]),
        "val": sorted(ids[n_train:n_train + n_val]),
        "test": sorted(ids[n_train + n_val:]),
    }

    datasets = {}
    for split, members in split_map.items():
        samples = []
        for im in images:
            if im.id not in members:
                continue
            raster = rasters[im.id]
            planes = tuple(
                normalize_image(ImagePlane(raster[:, :, c].astype(np.float64)))
                for c in range(3)
            )
            samples.append(ImageSample(
                id=Path(im.file_name).stem,
                rgb=planes,
                annotations=tuple(per_image[im.id]),
            ))
        datasets[split] = Dataset(
            samples=tuple(samples),
            categories=tuple(c.name for c in categories),
            split=split,
        )
    return SynthResult(
        manifest=manifest, split_map=split_map, rasters=rasters, datasets=datasets,
    )


def write_dataset(result: SynthResult, out_dir: Path | str, write_masks: bool = False) -> None:
    """Persist a generated dataset: images/*.ppm, annotations.json, splits.json.

    With `write_masks`, full-image ground-truth masks are emitted under
    masks/ as 8-bit PGM.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for im in result.manifest.images:
        write_ppm(out / "images" / im.file_name, result.rasters[im.id])
    (out / "annotations.json").write_text(serialize_coco(result.manifest))
    write_split_map(out, result.split_map)
    if write_masks:
        from .privileged import encode_mask, mask_to_uint8

        (out / "masks").mkdir(exist_ok=True)
        num_classes = len(result.manifest.categories)
        by_image: dict[int, list] = {im.id: [] for im in result.manifest.images}
        class_index = result.manifest.class_index()
        for ann in result.manifest.annotations:
            x, y, w, h = ann.bbox
            by_image[ann.image_id].append(Annotation(
                box=BoundingBox(x, y, x + w, y + h),
                class_id=class_index[ann.category_id],
            ))
        for im in result.manifest.images:
            mask = encode_mask(by_image[im.id], im.width, im.height, num_classes)
            stem = Path(im.file_name).stem
            write_pgm(out / "masks" / f"{stem}_priv.pgm", mask_to_uint8(mask))
