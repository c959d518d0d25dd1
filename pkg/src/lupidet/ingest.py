"""Dataset loading: COCO-style JSON manifests, PPM/PGM rasters, normalization.

Raster formats are deliberately codec-free: binary PPM (P6) for RGB and
binary PGM (P5) for single planes, 8-bit, max value 255.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Annotation, BoundingBox, Dataset, ImagePlane, ImageSample

SPLITS_FILENAME = "splits.json"
MANIFEST_FILENAME = "annotations.json"


class DatasetError(Exception):
    """Raised for any malformed, inconsistent, or unreadable dataset input."""


# ---------------------------------------------------------------------------
# Raster IO
# ---------------------------------------------------------------------------

def _read_pnm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated numeric header tokens, skipping # comments.

    Returns the tokens and the offset of the byte following the single
    whitespace character that terminates the last token.
    """
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise DatasetError("truncated PNM header")
        c = data[i:i + 1]
        if c == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            tok = data[i:j]
            if not tok.isdigit():
                raise DatasetError(f"bad PNM header token {tok!r}")
            tokens.append(int(tok))
            i = j
            if len(tokens) == count:
                # exactly one whitespace byte separates header from pixel data
                if i >= len(data) or not data[i:i + 1].isspace():
                    raise DatasetError("missing whitespace after PNM header")
                i += 1
    return tokens, i


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read raster {path}: {exc}") from exc
    if not data.startswith(magic):
        raise DatasetError(f"{path}: expected {magic.decode()} raster")
    (w, h, maxval), offset = _read_pnm_tokens(data[2:], 3)
    offset += 2
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit rasters supported, maxval={maxval}")
    need = w * h * channels
    pixels = data[offset:offset + need]
    if len(pixels) != need:
        raise DatasetError(f"{path}: expected {need} pixel bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, channels)


def read_ppm(path: Path | str) -> np.ndarray:
    """Read a binary P6 image into a (height, width, 3) uint8 array."""
    return _read_pnm(Path(path), b"P6", 3)


def read_pgm(path: Path | str) -> np.ndarray:
    """Read a binary P5 image into a (height, width) uint8 array."""
    return _read_pnm(Path(path), b"P5", 1)


def write_ppm(path: Path | str, pixels: np.ndarray) -> None:
    """Write a (height, width, 3) uint8 array as binary P6."""
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) array, got {arr.shape}")
    h, w = arr.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_pgm(path: Path | str, pixels: np.ndarray) -> None:
    """Write a (height, width) uint8 array as binary P5."""
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"expected (h, w) array, got {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


# ---------------------------------------------------------------------------
# COCO manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CocoImage:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class CocoAnnotation:
    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]  # [x, y, width, height]


@dataclass(frozen=True)
class CocoCategory:
    id: int
    name: str


@dataclass(frozen=True)
class CocoManifest:
    images: tuple[CocoImage, ...]
    annotations: tuple[CocoAnnotation, ...]
    categories: tuple[CocoCategory, ...]

    def class_index(self) -> dict[int, int]:
        """Dense 0-based class ids, in ascending original-id order."""
        return {c.id: k for k, c in enumerate(sorted(self.categories, key=lambda c: c.id))}

    def category_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in sorted(self.categories, key=lambda c: c.id))


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise DatasetError(f"manifest {where} entry missing field {key!r}")
    return obj[key]


def parse_coco(json_text: str) -> CocoManifest:
    """Parse and validate a COCO-style manifest.

    Category ids are kept as-is here; `class_index()` provides the dense
    remap. Referential integrity and bbox positivity are enforced.
    """
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DatasetError("manifest root must be a JSON object")
    for section in ("images", "annotations", "categories"):
        if not isinstance(doc.get(section), list):
            raise DatasetError(f"manifest missing list field {section!r}")

    images = []
    for entry in doc["images"]:
        images.append(CocoImage(
            id=int(_require(entry, "id", "images")),
            file_name=str(_require(entry, "file_name", "images")),
            width=int(_require(entry, "width", "images")),
            height=int(_require(entry, "height", "images")),
        ))
    categories = []
    for entry in doc["categories"]:
        categories.append(CocoCategory(
            id=int(_require(entry, "id", "categories")),
            name=str(_require(entry, "name", "categories")),
        ))
    annotations = []
    for entry in doc["annotations"]:
        bbox = _require(entry, "bbox", "annotations")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise DatasetError(f"annotation bbox must be [x, y, w, h], got {bbox!r}")
        annotations.append(CocoAnnotation(
            id=int(_require(entry, "id", "annotations")),
            image_id=int(_require(entry, "image_id", "annotations")),
            category_id=int(_require(entry, "category_id", "annotations")),
            bbox=tuple(float(v) for v in bbox),
        ))

    image_ids = {im.id for im in images}
    if len(image_ids) != len(images):
        raise DatasetError("duplicate image ids in manifest")
    category_ids = {c.id for c in categories}
    if len(category_ids) != len(categories):
        raise DatasetError("duplicate category ids in manifest")
    for ann in annotations:
        if ann.image_id not in image_ids:
            raise DatasetError(f"annotation {ann.id} references missing image_id {ann.image_id}")
        if ann.category_id not in category_ids:
            raise DatasetError(f"annotation {ann.id} references missing category_id {ann.category_id}")
        if ann.bbox[2] <= 0 or ann.bbox[3] <= 0:
            raise DatasetError(f"annotation {ann.id} has non-positive bbox dims {ann.bbox}")
        if not all(math.isfinite(v) for v in ann.bbox):
            raise DatasetError(f"annotation {ann.id} has non-finite bbox {ann.bbox}")
    return CocoManifest(tuple(images), tuple(annotations), tuple(categories))


def serialize_coco(manifest: CocoManifest) -> str:
    """Inverse of parse_coco for the fields it reads; stable key order."""
    doc = {
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
            for im in manifest.images
        ],
        "annotations": [
            {"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
             "bbox": list(a.bbox)}
            for a in manifest.annotations
        ],
        "categories": [{"id": c.id, "name": c.name} for c in manifest.categories],
    }
    return json.dumps(doc, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# Normalization and dataset assembly
# ---------------------------------------------------------------------------

def normalize_image(plane: ImagePlane) -> ImagePlane:
    """Min-max normalize one plane to [0, 1]; a constant plane maps to zeros.

    Normalization is per-plane per-image, not dataset-global.
    """
    v = plane.values
    lo = v.min()
    hi = v.max()
    if hi == lo:
        return ImagePlane(np.zeros_like(v))
    return ImagePlane((v - lo) / (hi - lo))


def sample_id_for(image: CocoImage) -> str:
    """Stable sample id: the raster file name without its extension."""
    return Path(image.file_name).stem


def load_dataset(
    manifest: CocoManifest,
    image_dir: Path | str,
    split: str = "train",
    image_ids: set[int] | None = None,
    normalize: bool = True,
) -> Dataset:
    """Assemble a Dataset from a manifest and a directory of PPM rasters.

    Samples follow manifest image order. `image_ids`, when given, restricts
    loading to that subset (used for split selection). RGB planes are
    min-max normalized unless `normalize` is False; the privileged plane is
    always absent here and attached by the privileged/preparation stage.
    """
    image_dir = Path(image_dir)
    class_index = manifest.class_index()
    by_image: dict[int, list[CocoAnnotation]] = {im.id: [] for im in manifest.images}
    for ann in manifest.annotations:
        by_image[ann.image_id].append(ann)

    samples = []
    for im in manifest.images:
        if image_ids is not None and im.id not in image_ids:
            continue
        raster = read_ppm(image_dir / im.file_name)
        if raster.shape[0] != im.height or raster.shape[1] != im.width:
            raise DatasetError(
                f"{im.file_name}: raster is {raster.shape[1]}x{raster.shape[0]} but manifest "
                f"says {im.width}x{im.height}"
            )
        planes = []
        for c in range(3):
            plane = ImagePlane(raster[:, :, c].astype(np.float64))
            planes.append(normalize_image(plane) if normalize else plane)
        annotations = []
        for ann in by_image[im.id]:
            x, y, w, h = ann.bbox
            annotations.append(Annotation(
                box=BoundingBox(x, y, x + w, y + h),
                class_id=class_index[ann.category_id],
            ))
        try:
            samples.append(ImageSample(
                id=sample_id_for(im),
                rgb=tuple(planes),
                annotations=tuple(annotations),
            ))
        except ValueError as exc:
            raise DatasetError(f"invalid sample from {im.file_name}: {exc}") from exc
    return Dataset(samples=tuple(samples), categories=manifest.category_names(), split=split)


def read_split_map(root: Path | str) -> dict[str, list[int]]:
    """Read the sidecar split map {split: [image ids]} next to the manifest."""
    path = Path(root) / SPLITS_FILENAME
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read split map {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"split map {path} is not valid JSON: {exc}") from exc
    return {split: [int(i) for i in ids] for split, ids in doc.items()}


def write_split_map(root: Path | str, split_map: dict[str, list[int]]) -> None:
    path = Path(root) / SPLITS_FILENAME
    path.write_text(json.dumps(split_map, sort_keys=True, indent=1))


def load_split_dir(
    root: Path | str,
    split: str,
    with_masks: bool = False,
) -> Dataset:
    """Load one split of an on-disk dataset tree.

    Layout: <root>/images/*.ppm, <root>/annotations.json, <root>/splits.json,
    and optionally <root>/masks/<sample_id>_priv.pgm. Masks are read on an
    absolute 8-bit scale (v / 255) so class shades survive the round trip.
    """
    root = Path(root)
    manifest_path = root / MANIFEST_FILENAME
    try:
        manifest = parse_coco(manifest_path.read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    split_map = read_split_map(root)
    if split not in split_map:
        raise DatasetError(f"split {split!r} not present in {root / SPLITS_FILENAME}")
    ds = load_dataset(manifest, root / "images", split=split, image_ids=set(split_map[split]))
    if not with_masks:
        return ds
    samples = []
    for s in ds.samples:
        mask_path = root / "masks" / f"{s.id}_priv.pgm"
        mask = read_pgm(mask_path).astype(np.float64) / 255.0
        samples.append(ImageSample(
            id=s.id, rgb=s.rgb, annotations=s.annotations,
            privileged=ImagePlane(mask),
        ))
    return Dataset(samples=tuple(samples), categories=ds.categories, split=split)
