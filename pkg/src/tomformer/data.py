"""Annotation manifests, PPM image I/O, preprocessing, batching and a synthetic dataset."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from tomformer.errors import ImageFormatError, RecordError, SchemaError, VocabularyError
from tomformer.matching import BoundingBox
from tomformer.tensor import Tensor

log = logging.getLogger(__name__)

CLASSES = (
    "healthy",
    "bacterial spots",
    "early blight",
    "late blight",
    "leaf mold",
    "septoria leaf spot",
    "mosaic virus",
    "yellow leaf curl",
)
MAX_OBJECTS_WARNING = 15
IMAGE_MEAN = 0.5
IMAGE_STD = 0.5


@dataclass(frozen=True)
class Annotation:
    """Ground-truth object with its box in absolute pixels (top-left corner + size)."""

    image_id: str
    class_id: int
    x: int
    y: int
    w: int
    h: int
    image_width: int
    image_height: int

    @property
    def box(self) -> BoundingBox:
        """Normalized center-form box."""
        W, H = self.image_width, self.image_height
        return BoundingBox((self.x + self.w / 2) / W, (self.y + self.h / 2) / H, self.w / W, self.h / H)

    def in_bounds(self) -> bool:
        return (
            self.x >= 0
            and self.y >= 0
            and self.w >= 0
            and self.h >= 0
            and self.x + self.w <= self.image_width
            and self.y + self.h <= self.image_height
        )


def denormalize(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Center-form normalized box -> integer pixel (x, y, w, h)."""
    x0, y0, x1, y1 = box.corners()
    x, y = round(x0 * width), round(y0 * height)
    return x, y, round(x1 * width) - x, round(y1 * height) - y


@dataclass
class ImageRecord:
    image_id: str
    path: Path
    width: int
    height: int
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def targets(self) -> list[tuple[int, BoundingBox]]:
        return [(a.class_id, a.box) for a in self.annotations]


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    split: str = "train"
    classes: tuple[str, ...] = CLASSES

    def __len__(self) -> int:
        return len(self.records)

    @property
    def annotations(self) -> list[Annotation]:
        return [a for r in self.records for a in r.annotations]


# ---------------------------------------------------------------------------
# manifest JSON


def _require(obj: dict, key: str, kind, path: str):
    if not isinstance(obj, dict):
        raise SchemaError("expected an object", path)
    if key not in obj:
        raise SchemaError(f"missing field {key!r}", path)
    value = obj[key]
    ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok:
        raise SchemaError(f"field {key!r} must be {getattr(kind, '__name__', kind)}", f"{path}.{key}")
    return value


def load_annotations(path: str | os.PathLike, split: str = "train", check_images: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    Image paths are resolved relative to the manifest's directory. With
    ``check_images`` every referenced file must exist and decode.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON ({exc})") from exc
    classes = _require(doc, "classes", list, "$")
    if any(not isinstance(c, str) for c in classes):
        raise SchemaError("class names must be strings", "$.classes")
    if list(classes) != list(CLASSES):
        unknown = [c for c in classes if c not in CLASSES]
        if unknown:
            raise VocabularyError(f"unknown classes in vocabulary: {unknown}")
        raise VocabularyError(f"class vocabulary must be {list(CLASSES)} in this order, got {classes}")
    images = _require(doc, "images", list, "$")

    records: list[ImageRecord] = []
    bad: list[str] = []
    seen: set[str] = set()
    for i, img in enumerate(images):
        ipath = f"$.images[{i}]"
        image_id = _require(img, "id", str, ipath)
        file = _require(img, "file", str, ipath)
        width = _require(img, "width", int, ipath)
        height = _require(img, "height", int, ipath)
        anns = _require(img, "annotations", list, ipath)
        if image_id in seen:
            raise RecordError("duplicate image id", [image_id])
        seen.add(image_id)
        record = ImageRecord(image_id, path.parent / file, width, height)
        for j, ann in enumerate(anns):
            apath = f"{ipath}.annotations[{j}]"
            name = _require(ann, "class", str, apath)
            if name not in CLASSES:
                raise VocabularyError(f"{apath}.class: unknown class {name!r}")
            a = Annotation(
                image_id,
                CLASSES.index(name),
                *(_require(ann, key, int, apath) for key in ("x", "y", "w", "h")),
                image_width=width,
                image_height=height,
            )
            if not a.in_bounds() and image_id not in bad:
                bad.append(image_id)
            record.annotations.append(a)
        if len(record.annotations) > MAX_OBJECTS_WARNING:
            log.warning("image %s has %d objects (more than %d)", image_id, len(record.annotations), MAX_OBJECTS_WARNING)
        records.append(record)
    if bad:
        raise RecordError("annotation box outside image bounds", bad)
    if check_images:
        for record in records:
            if not record.path.is_file():
                raise RecordError(f"image file not found: {record.path}", [record.image_id])
            pixels = read_ppm(record.path)
            if pixels.shape[:2] != (record.height, record.width):
                raise RecordError(
                    f"image is {pixels.shape[1]}x{pixels.shape[0]}, manifest says {record.width}x{record.height}",
                    [record.image_id],
                )
    return DatasetManifest(records, split=split)


def manifest_to_json(manifest: DatasetManifest, root: Path) -> dict:
    images = []
    for r in manifest.records:
        images.append(
            {
                "id": r.image_id,
                "file": Path(os.path.relpath(r.path, root)).as_posix(),
                "width": r.width,
                "height": r.height,
                "annotations": [
                    {"class": CLASSES[a.class_id], "x": a.x, "y": a.y, "w": a.w, "h": a.h} for a in r.annotations
                ],
            }
        )
    return {"classes": list(CLASSES), "images": images}


# ---------------------------------------------------------------------------
# PPM codec


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        elif buf[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Raw H x W x 3 uint8 pixels of a binary P6 file."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {magic[:8]!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"{path}: malformed header")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported, need 255")
    pos += 1  # single whitespace byte before the raster
    need = width * height * 3
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageFormatError(f"expected H x W x 3 uint8 pixels, got {pixels.dtype} {pixels.shape}")
    h, w, _ = pixels.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def decode_image(path: str | os.PathLike) -> Tensor:
    """P6 file -> 3 x H x W tensor in [0, 1], RGB."""
    return Tensor(read_ppm(path).transpose(2, 0, 1).astype(np.float64) / 255.0)


def encode_image(image: Tensor | np.ndarray) -> np.ndarray:
    """3 x H x W values in [0, 1] -> H x W x 3 uint8 (inverse of decode_image on 8-bit data)."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    return np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def resize_nearest(image: Tensor, height: int, width: int) -> Tensor:
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    _, h, w = data.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return Tensor(data[:, rows][:, :, cols])


def normalize_and_resize(image: Tensor, height: int, width: int) -> Tensor:
    """Nearest-neighbor resize then (x - 0.5) / 0.5 standardization per channel."""
    return Tensor((resize_nearest(image, height, width).data - IMAGE_MEAN) / IMAGE_STD)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Sample:
    image_id: str
    image: Tensor
    targets: list[tuple[int, BoundingBox]]


def load_samples(manifest: DatasetManifest, height: int, width: int) -> list[Sample]:
    return [
        Sample(r.image_id, normalize_and_resize(decode_image(r.path), height, width), r.targets)
        for r in manifest.records
    ]


def batch(samples: Sequence, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[list, list]]:
    """Yield (images, targets) lists; the final partial batch is kept.

    ``samples`` holds :class:`Sample` objects. With ``shuffle_seed`` the order
    is a seeded permutation, otherwise the input order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        yield [s.image for s in chunk], [s.targets for s in chunk]


# ---------------------------------------------------------------------------
# synthetic leaf-disease dataset


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 32
    samples_per_class: int = 8
    seed: int = 7
    min_blobs: int = 1
    max_blobs: int = 3
    min_blob_size: int = 6
    max_blob_size: int = 12
    background: tuple[tuple[int, int, int], ...] = ((34, 96, 38), (52, 120, 48), (28, 80, 30))

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "samples_per_class": self.samples_per_class,
            "seed": self.seed,
            "min_blobs": self.min_blobs,
            "max_blobs": self.max_blobs,
            "min_blob_size": self.min_blob_size,
            "max_blob_size": self.max_blob_size,
            "background": [list(c) for c in self.background],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "background" in d:
            d["background"] = tuple(tuple(int(v) for v in c) for c in d["background"])
        return cls(**d)


# Per class: base color, speckle color, shape.
_SIGNATURES = (
    ((120, 200, 90), None, "ellipse"),  # healthy: light green leaflet
    ((40, 30, 20), (200, 190, 60), "ellipse"),  # bacterial spots: dark with yellow halo specks
    ((140, 90, 40), (60, 40, 20), "ring"),  # early blight: brown concentric ring
    ((70, 60, 80), (150, 150, 150), "rect"),  # late blight: grey-violet patch
    ((200, 190, 80), (110, 120, 40), "rect"),  # leaf mold: olive-yellow patch
    ((230, 230, 220), (60, 40, 30), "ellipse"),  # septoria: pale spot, dark specks
    ((230, 240, 60), (60, 160, 40), "diamond"),  # mosaic: yellow/green mottled diamond
    ((250, 220, 0), None, "diamond"),  # yellow leaf curl: saturated yellow
)


def _blob_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if shape == "rect":
        return np.ones((h, w), dtype=bool)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    r = u * u + v * v
    if shape == "ring":
        return (r <= 1.0) & ((r >= 0.3) | (r <= 0.08))
    return r <= 1.0


def _render(rng: np.random.Generator, cfg: SynthConfig, class_id: int):
    s = cfg.image_size
    palette = np.array(cfg.background, dtype=np.float64)
    base = palette[rng.integers(len(palette))]
    texture = rng.normal(0.0, 8.0, size=(s, s, 1)) + rng.normal(0.0, 4.0, size=(s, s, 3))
    img = base + texture
    occupied = np.zeros((s, s), dtype=bool)
    color, speckle, shape = _SIGNATURES[class_id]
    boxes = []
    for _ in range(int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))):
        for _attempt in range(50):
            bh = int(rng.integers(cfg.min_blob_size, cfg.max_blob_size + 1))
            bw = int(rng.integers(cfg.min_blob_size, cfg.max_blob_size + 1))
            y0 = int(rng.integers(0, s - bh + 1))
            x0 = int(rng.integers(0, s - bw + 1))
            if not occupied[max(0, y0 - 1) : y0 + bh + 1, max(0, x0 - 1) : x0 + bw + 1].any():
                break
        else:
            continue
        mask = _blob_mask(shape, bh, bw)
        patch = np.broadcast_to(np.array(color, dtype=np.float64), (bh, bw, 3)).copy()
        patch += rng.normal(0.0, 6.0, size=(bh, bw, 1))
        if speckle is not None:
            dots = rng.random((bh, bw)) < 0.25
            patch[dots] = speckle
        region = img[y0 : y0 + bh, x0 : x0 + bw]
        region[mask] = patch[mask]
        occupied[y0 : y0 + bh, x0 : x0 + bw] = True
        ys, xs = np.nonzero(mask)
        boxes.append((x0 + int(xs.min()), y0 + int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), boxes


def synth_dataset(config: SynthConfig, out_dir: str | os.PathLike) -> tuple[DatasetManifest, Path]:
    """Write PPM images plus ``manifest.json`` under ``out_dir``; fully determined by the seed."""
    out = Path(out_dir)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    records = []
    s = config.image_size
    for class_id in range(len(CLASSES)):
        for k in range(config.samples_per_class):
            image_id = f"c{class_id}_{k:03d}"
            pixels, boxes = _render(rng, config, class_id)
            file = images_dir / f"{image_id}.ppm"
            write_ppm(file, pixels)
            anns = [Annotation(image_id, class_id, x, y, w, h, s, s) for (x, y, w, h) in boxes]
            records.append(ImageRecord(image_id, file, s, s, anns))
    manifest = DatasetManifest(records)
    for rec in records:
        for a in rec.annotations:
            if not a.in_bounds() or a.w * a.h < 4:
                raise RecordError("generator produced an invalid box", [rec.image_id])
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest_to_json(manifest, out), indent=1) + "\n", encoding="utf-8")
    return manifest, manifest_path
