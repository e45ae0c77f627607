"""
Seeded synthetic shapes dataset.

On disk a dataset is a directory holding

    manifest.json   counts, class list, seed, per-image object records (pixel boxes)
    images.bin      uint8 images in manifest order, each stored as three row-major
                    planes (R, G, B) of H*W bytes

All randomness comes from one PCG64 generator (numpy ``default_rng(seed)``)
consumed in a fixed order, so a seed regenerates the files byte for byte.
"""
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from slimdet.checkpoint import atomic_directory, dump_json, sha256_hex
from slimdet.errors import ConfigError, FormatError
from slimdet.priors import Annotation
from slimdet.tensor import Tensor


FORMAT_NAME = "slimdet-dataset"
FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
IMAGES_FILE = "images.bin"
CLASS_NAMES = ("circle", "square", "triangle")

MARGIN = 2
SMALL_SIZES = (8, 28)
LARGE_SIZES = (36, 64)
MAX_OBJECTS = 4
BACKGROUND_MAX = 80
SHAPE_COLOR_MIN = 120
NOISE = 8


@dataclass
class DatasetManifest:
    """Everything about a dataset except the pixels."""

    count: int
    image_size: int
    seed: int
    small_fraction: float
    classes: List[str] = field(default_factory=lambda: list(CLASS_NAMES))
    records: List[Dict[str, Any]] = field(default_factory=list)
    images_nbytes: int = 0
    images_sha256: str = ""

    @property
    def image_nbytes(self) -> int:
        return 3 * self.image_size * self.image_size

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": FORMAT_NAME,
            "format_version": FORMAT_VERSION,
            "count": self.count,
            "image_size": [self.image_size, self.image_size, 3],
            "classes": list(self.classes),
            "seed": self.seed,
            "small_fraction": self.small_fraction,
            "images_file": IMAGES_FILE,
            "images_nbytes": self.images_nbytes,
            "images_sha256": self.images_sha256,
            "records": self.records,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetManifest":
        height, width, channels = data["image_size"]
        if height != width or channels != 3:
            raise ValueError(f"unsupported image size {data['image_size']}")
        return cls(
            count=int(data["count"]),
            image_size=int(height),
            seed=int(data["seed"]),
            small_fraction=float(data["small_fraction"]),
            classes=list(data["classes"]),
            records=list(data["records"]),
            images_nbytes=int(data["images_nbytes"]),
            images_sha256=str(data["images_sha256"]),
        )


class DetectionDataset:
    """Images (uint8 planes) plus pixel-space object records."""

    def __init__(self, manifest: DatasetManifest, pixels: np.ndarray):
        self.manifest = manifest
        self.pixels = pixels
        self._images: Optional[np.ndarray] = None
        self._annotations: Optional[List[List[Annotation]]] = None

    def __len__(self) -> int:
        return self.manifest.count

    @property
    def image_size(self) -> int:
        return self.manifest.image_size

    @property
    def images(self) -> np.ndarray:
        """[N, 3, H, W] float32 scaled to [0, 1]."""
        if self._images is None:
            self._images = self.pixels.astype(np.float32) / np.float32(255.0)
        return self._images

    @property
    def annotations(self) -> List[List[Annotation]]:
        if self._annotations is None:
            size = float(self.image_size)
            self._annotations = [
                [Annotation(int(obj["class_id"]), tuple(v / size for v in obj["box"])) for obj in record["objects"]]
                for record in self.manifest.records
            ]
        return self._annotations

    def __iter__(self) -> Iterator[Tuple[Tensor, List[Annotation]]]:
        for image, truths in zip(self.images, self.annotations):
            yield Tensor(image), truths

    def pixel_areas(self) -> List[int]:
        return [
            (obj["box"][2] - obj["box"][0]) * (obj["box"][3] - obj["box"][1])
            for record in self.manifest.records for obj in record["objects"]
        ]


def shape_mask(class_name: str, d: int) -> np.ndarray:
    """Boolean d x d mask, tested at pixel centres."""
    yy, xx = np.mgrid[0:d, 0:d] + 0.5
    half = d / 2.0
    if class_name == "circle":
        return (xx - half) ** 2 + (yy - half) ** 2 <= half * half
    if class_name == "square":
        return np.ones((d, d), dtype=bool)
    if class_name == "triangle":
        # apex at the top centre, base along the bottom edge
        return np.abs(xx - half) <= yy / 2.0
    raise ConfigError(f"unknown shape class '{class_name}'")


def _size_range(small: bool, cell: int) -> Tuple[int, int]:
    """Shape side lengths that fit one layout cell with the margin on every side."""
    lo, hi = SMALL_SIZES if small else LARGE_SIZES
    return lo, min(hi, cell - 2 * MARGIN)


def layout_cells(image_size: int, small_fraction: float) -> int:
    """
    Cells per image side: 2 (one object per quadrant) unless a large object
    cannot fit a quadrant, in which case the whole canvas is one cell.
    """
    if small_fraction < 1.0 and _size_range(False, image_size // 2)[1] < LARGE_SIZES[0]:
        return 1
    return 2


def render_dataset(seed: int, n_images: int, image_size: int = 96, small_fraction: float = 0.5) -> DetectionDataset:
    """
    Draw ``n_images`` images in memory.

    Each image holds 1-4 shapes, each inside its own quadrant. Canvases too
    small for a large object in a quadrant hold one shape per image instead.

    Args:
        seed: Generator seed
        n_images: Number of images (>= 1)
        image_size: Side length in pixels
        small_fraction: Probability that an object is small (pixel box area < 32*32)

    Returns:
        DetectionDataset whose manifest lacks only the blob checksum until saved
    """
    if n_images < 1:
        raise ConfigError(f"n_images must be >= 1, got {n_images}")
    if not 0.0 <= small_fraction <= 1.0:
        raise ConfigError(f"small_fraction must lie in [0, 1], got {small_fraction}")
    cells = layout_cells(image_size, small_fraction)
    cell = image_size // cells
    if _size_range(True, cell)[1] < SMALL_SIZES[0]:
        raise ConfigError(f"image_size {image_size} is too small to host a shape")
    if small_fraction < 1.0 and _size_range(False, cell)[1] < LARGE_SIZES[0]:
        raise ConfigError(
            f"image_size {image_size} cannot host objects larger than 32x32; use small_fraction 1")

    rng = np.random.default_rng(seed)
    pixels = np.empty((n_images, 3, image_size, image_size), dtype=np.uint8)
    records = []
    for i in range(n_images):
        canvas = np.empty((image_size, image_size, 3), dtype=np.int16)
        canvas[...] = rng.integers(0, BACKGROUND_MAX + 1, size=3)
        count = int(rng.integers(1, min(MAX_OBJECTS, cells * cells) + 1))
        # one object per cell, so shapes never overlap
        slots = rng.permutation(cells * cells)[:count]
        objects = []
        for slot in slots:
            class_index = int(rng.integers(0, len(CLASS_NAMES)))
            small = bool(rng.random() < small_fraction)
            lo, hi = _size_range(small, cell)
            d = int(rng.integers(lo, hi + 1))
            color = rng.integers(SHAPE_COLOR_MIN, 256, size=3)
            x = int(slot % cells) * cell + MARGIN + int(rng.integers(0, cell - 2 * MARGIN - d + 1))
            y = int(slot // cells) * cell + MARGIN + int(rng.integers(0, cell - 2 * MARGIN - d + 1))
            mask = shape_mask(CLASS_NAMES[class_index], d)
            canvas[y:y + d, x:x + d][mask] = color
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            box = [x + int(cols[0]), y + int(rows[0]), x + int(cols[-1]) + 1, y + int(rows[-1]) + 1]
            objects.append({"class_id": class_index + 1, "box": box})
        canvas += rng.integers(-NOISE, NOISE + 1, size=canvas.shape, dtype=np.int16)
        pixels[i] = np.clip(canvas, 0, 255).astype(np.uint8).transpose(2, 0, 1)
        records.append({"objects": objects})

    manifest = DatasetManifest(count=n_images, image_size=image_size, seed=seed,
                               small_fraction=float(small_fraction), records=records)
    blob = pixels.tobytes(order="C")
    manifest.images_nbytes = len(blob)
    manifest.images_sha256 = sha256_hex(blob)
    return DetectionDataset(manifest, pixels)


def save_dataset(path: str, dataset: DetectionDataset) -> str:
    """Write manifest.json and images.bin atomically."""
    blob = np.ascontiguousarray(dataset.pixels, dtype=np.uint8).tobytes(order="C")
    dataset.manifest.images_nbytes = len(blob)
    dataset.manifest.images_sha256 = sha256_hex(blob)
    with atomic_directory(path) as staging:
        with open(os.path.join(staging, IMAGES_FILE), "wb") as f:
            f.write(blob)
        with open(os.path.join(staging, MANIFEST_FILE), "wb") as f:
            f.write(dump_json(dataset.manifest.to_dict()))
    return path


def generate_dataset(
    path: str, seed: int, n_images: int, image_size: int = 96, small_fraction: float = 0.5
) -> DatasetManifest:
    dataset = render_dataset(seed, n_images, image_size, small_fraction)
    save_dataset(path, dataset)
    return dataset.manifest


def load_dataset(path: str) -> DetectionDataset:
    """
    Read and validate a dataset directory.

    Sizes and the blob checksum are verified before anything is returned.
    """
    manifest_path = os.path.join(path, MANIFEST_FILE)
    images_path = os.path.join(path, IMAGES_FILE)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise FormatError("file is missing", path=manifest_path)
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}", path=manifest_path)
    if data.get("format") != FORMAT_NAME or data.get("format_version") != FORMAT_VERSION:
        raise FormatError("not a slimdet dataset (or unsupported version)", path=manifest_path)
    try:
        manifest = DatasetManifest.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"invalid manifest: {e}", path=manifest_path)
    if len(manifest.records) != manifest.count:
        raise FormatError(f"{len(manifest.records)} records for {manifest.count} images", path=manifest_path)

    try:
        with open(images_path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise FormatError("file is missing", path=images_path)
    expected = manifest.count * manifest.image_nbytes
    if len(blob) != expected or len(blob) != manifest.images_nbytes:
        raise FormatError(f"holds {len(blob)} bytes, manifest declares {expected}", path=images_path)
    if sha256_hex(blob) != manifest.images_sha256:
        raise FormatError("checksum mismatch", path=images_path)

    size = manifest.image_size
    for k, record in enumerate(manifest.records):
        for obj in record.get("objects", []):
            x0, y0, x1, y1 = obj["box"]
            if not (0 <= x0 < x1 <= size and 0 <= y0 < y1 <= size):
                raise FormatError(f"image {k} has an object box {obj['box']} outside the image", path=manifest_path)
            if not 1 <= obj["class_id"] <= len(manifest.classes):
                raise FormatError(f"image {k} has unknown class id {obj['class_id']}", path=manifest_path)
    pixels = np.frombuffer(blob, dtype=np.uint8).reshape(manifest.count, 3, size, size).copy()
    return DetectionDataset(manifest, pixels)
