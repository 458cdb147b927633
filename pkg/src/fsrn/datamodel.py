"""Dataset types, annotation-file ingestion and the synthetic shapes benchmark.

Boxes are (x, y, w, h) in pixels, top-left origin, half-open intervals.
Images are float32 (H, W, 3) arrays with values in [0, 1], made read-only on
construction so records can be shared freely across threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

SHAPES = ("circle", "square", "triangle", "ring")
COLORS = {
    "red": (0.85, 0.16, 0.12),
    "green": (0.16, 0.78, 0.20),
    "blue": (0.16, 0.32, 0.88),
}

DEFAULT_SUPPORT_SIZE = 64


class DatasetParseError(ValueError):
    """Annotation file is malformed; the message names the offending record."""


class DatasetValidationError(ValueError):
    """A dataset invariant (split disjointness, box validity, ...) is broken."""


class ConfigurationError(ValueError):
    """Caller-supplied configuration cannot produce a valid artifact."""


class ClassInfo(NamedTuple):
    name: str
    split: str  # "base" | "novel"


@dataclass(frozen=True)
class ClassSpec:
    """One synthetic category: a shape drawn in a color."""

    shape: str
    color: str
    split: str = "base"

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class Annotation:
    """One labeled instance: integer class id and (x, y, w, h) box."""

    class_id: int
    bbox: tuple[float, float, float, float]
    ann_id: int = -1


@dataclass(eq=False)
class ImageRecord:
    image_id: int
    pixels: np.ndarray
    annotations: tuple[Annotation, ...]

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        self.pixels.flags.writeable = False
        self.annotations = tuple(self.annotations)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def class_ids(self) -> set[int]:
        return {a.class_id for a in self.annotations}


@dataclass(eq=False)
class DetectionDataset:
    records: list[ImageRecord]
    class_table: dict[int, ClassInfo]
    shot_budget: int | None = None
    _by_class: dict[int, list[tuple[ImageRecord, Annotation]]] | None = field(default=None, repr=False)
    _ann_index: dict[int, tuple[ImageRecord, Annotation]] | None = field(default=None, repr=False)

    @property
    def base_class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(c for c, info in self.class_table.items() if info.split == "base"))

    @property
    def novel_class_ids(self) -> tuple[int, ...]:
        return tuple(sorted(c for c, info in self.class_table.items() if info.split == "novel"))

    def annotations_by_class(self) -> dict[int, list[tuple[ImageRecord, Annotation]]]:
        if self._by_class is None:
            by_class: dict[int, list[tuple[ImageRecord, Annotation]]] = {c: [] for c in self.class_table}
            for rec in self.records:
                for ann in rec.annotations:
                    by_class[ann.class_id].append((rec, ann))
            self._by_class = by_class
        return self._by_class

    def annotation_index(self) -> dict[int, tuple[ImageRecord, Annotation]]:
        if self._ann_index is None:
            self._ann_index = {
                ann.ann_id: (rec, ann) for rec in self.records for ann in rec.annotations
            }
        return self._ann_index

    def record_by_id(self, image_id: int) -> ImageRecord:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise KeyError(f"no image with id {image_id}")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for cid in sorted(self.class_table):
            info = self.class_table[cid]
            h.update(f"{cid}:{info.name}:{info.split};".encode())
        h.update(f"budget={self.shot_budget};".encode())
        for rec in self.records:
            h.update(f"img={rec.image_id};".encode())
            h.update(rec.pixels.tobytes())
            for a in rec.annotations:
                h.update(f"{a.ann_id}:{a.class_id}:{a.bbox};".encode())
        return h.hexdigest()


@dataclass(eq=False)
class SupportCrop:
    """Close-up of one annotated instance, resized to a square input."""

    class_id: int
    pixels: np.ndarray
    ann_id: int = -1
    source_size: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        self.pixels.flags.writeable = False


def default_class_specs() -> list[ClassSpec]:
    """12 shape/color categories: 8 base and 4 novel combinations, chosen so
    every shape and every color also occurs among the base classes."""
    novel = {("circle", "blue"), ("square", "green"), ("triangle", "red"), ("ring", "blue")}
    specs = []
    for shape in SHAPES:
        for color in COLORS:
            split = "novel" if (shape, color) in novel else "base"
            specs.append(ClassSpec(shape=shape, color=color, split=split))
    return specs


def class_table_from_specs(specs: Sequence[ClassSpec]) -> dict[int, ClassInfo]:
    """Class ids are 1-based positions in the spec list."""
    return {i + 1: ClassInfo(name=s.name, split=s.split) for i, s in enumerate(specs)}


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float image; identity when the size
    already matches (bit-exact passthrough)."""
    if image.shape[0] == out_h and image.shape[1] == out_w:
        return np.array(image, dtype=np.float32, copy=True)
    t = torch.from_numpy(np.array(image, dtype=np.float32, copy=True)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).contiguous().numpy()


# ---------------------------------------------------------------------------
# Synthetic shapes rendering
# ---------------------------------------------------------------------------

def background_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Mid-gray textured backdrop: a per-image base tint plus smooth coarse
    noise and fine grain. Consumes a fixed number of rng draws."""
    base = rng.uniform(0.30, 0.48, size=3)
    coarse = rng.normal(0.0, 0.055, size=(8, 8, 3)).astype(np.float32)
    fine = rng.normal(0.0, 0.015, size=(height, width, 3)).astype(np.float32)
    canvas = np.empty((height, width, 3), dtype=np.float32)
    canvas[:] = base.astype(np.float32)
    canvas += resize_bilinear(coarse, height, width)
    canvas += fine
    return np.clip(canvas, 0.0, 1.0)


def render_instance(canvas: np.ndarray, shape: str, color, bbox: tuple[int, int, int, int]) -> None:
    """Paint one shape instance in place. The box bounds the continuous shape
    exactly; pixels are filled by a center-inside test."""
    x, y, w, h = (int(v) for v in bbox)
    rgb = np.asarray(COLORS[color] if isinstance(color, str) else color, dtype=np.float32)
    yy, xx = np.mgrid[y:y + h, x:x + w]
    px = xx + 0.5
    py = yy + 0.5
    cx = x + w / 2.0
    cy = y + h / 2.0
    if shape == "square":
        mask = np.ones((h, w), dtype=bool)
    elif shape == "circle":
        rho = ((px - cx) / (w / 2.0)) ** 2 + ((py - cy) / (h / 2.0)) ** 2
        mask = rho <= 1.0
    elif shape == "ring":
        rho = np.sqrt(((px - cx) / (w / 2.0)) ** 2 + ((py - cy) / (h / 2.0)) ** 2)
        mask = (rho <= 1.0) & (rho >= 0.55)
    elif shape == "triangle":
        mask = np.abs(px - cx) * h <= (w / 2.0) * (py - y)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    region = canvas[y:y + h, x:x + w]
    region[mask] = rgb


def _boxes_clash(box: tuple[int, int, int, int], others: list[tuple[int, int, int, int]], gap: int = 2) -> bool:
    x, y, w, h = box
    for ox, oy, ow, oh in others:
        if x < ox + ow + gap and ox < x + w + gap and y < oy + oh + gap and oy < y + h + gap:
            return True
    return False


def _compose_image(
    canvas: np.ndarray,
    rng: np.random.Generator,
    image_id: int,
    class_ids: Sequence[int],
    specs_by_id: dict[int, ClassSpec],
    image_size: int,
    size_range: tuple[int, int],
) -> ImageRecord:
    """Draw the given class list (one instance per entry) onto the canvas.

    Instances are drawn in list order; each consumes its size/aspect draw
    before its placement attempts.
    """
    placed: list[tuple[int, int, int, int]] = []
    annotations: list[Annotation] = []
    lo, hi = size_range
    for cid in class_ids:
        w = int(rng.integers(lo, hi + 1))
        h = int(np.clip(round(w * rng.uniform(0.85, 1.2)), lo, hi))
        box = None
        attempts = 200 if not placed else 40
        for _ in range(attempts):
            x = int(rng.integers(1, image_size - w - 1))
            y = int(rng.integers(1, image_size - h - 1))
            if not _boxes_clash((x, y, w, h), placed):
                box = (x, y, w, h)
                break
        if box is None:
            continue  # crowded canvas, drop this instance
        spec = specs_by_id[cid]
        render_instance(canvas, spec.shape, spec.color, box)
        placed.append(box)
        annotations.append(Annotation(class_id=cid, bbox=tuple(float(v) for v in box)))
    return ImageRecord(image_id=image_id, pixels=canvas, annotations=tuple(annotations))


def _instance_class_list(
    rng: np.random.Generator,
    pool: Sequence[int],
    class_count_dist: dict[int, float],
    max_instances: int,
) -> list[int]:
    counts = sorted(class_count_dist)
    probs = np.array([class_count_dist[c] for c in counts], dtype=np.float64)
    probs /= probs.sum()
    c = int(rng.choice(counts, p=probs))
    c = min(c, len(pool))
    chosen = [int(v) for v in rng.choice(np.asarray(pool), size=c, replace=False)]
    m = int(rng.integers(c, max_instances + 1))
    extras = [chosen[int(rng.integers(c))] for _ in range(m - c)]
    return chosen + extras


DEFAULT_CLASS_COUNT_DIST = {1: 0.05, 2: 0.25, 3: 0.40, 4: 0.30}


def generate_shapes_dataset(
    seed: int,
    n_images: int,
    class_specs: Sequence[ClassSpec | tuple[str, str]],
    image_size: int,
    class_pool: Sequence[int] | None = None,
    class_count_dist: dict[int, float] | None = None,
    size_range: tuple[int, int] = (22, 52),
    max_instances: int = 6,
) -> DetectionDataset:
    """Deterministic synthetic detection dataset.

    Image ``i`` draws its background texture from the rng stream seeded with
    [seed, i, 0] and its layout (classes, sizes, placement) from [seed, i, 1],
    so an instance can be re-rendered in isolation from its annotation alone.
    Each image holds 1..max_instances non-overlapping instances whose
    distinct-class count follows ``class_count_dist``. ``class_pool``
    restricts which class ids may appear (default: all).
    """
    if n_images < 1:
        raise ConfigurationError("n_images must be >= 1")
    specs = [s if isinstance(s, ClassSpec) else ClassSpec(*s) for s in class_specs]
    if len(specs) < 2:
        raise ConfigurationError("need at least 2 class specs")
    if image_size < size_range[1] + 4:
        raise ConfigurationError(
            f"image_size {image_size} too small to place a {size_range[1]}px instance"
        )
    table = class_table_from_specs(specs)
    specs_by_id = {i + 1: s for i, s in enumerate(specs)}
    pool = list(class_pool) if class_pool is not None else sorted(table)
    unknown = [c for c in pool if c not in table]
    if unknown:
        raise ConfigurationError(f"class_pool ids not in class table: {unknown}")
    dist = class_count_dist or DEFAULT_CLASS_COUNT_DIST

    records = []
    for i in range(n_images):
        canvas = background_texture(np.random.default_rng([seed, i, 0]), image_size, image_size).copy()
        rng = np.random.default_rng([seed, i, 1])
        class_list = _instance_class_list(rng, pool, dist, max_instances)
        records.append(_compose_image(canvas, rng, i, class_list, specs_by_id, image_size, size_range))
    ds = DetectionDataset(records=records, class_table=table)
    _assign_ann_ids(ds)
    validate_dataset(ds)
    return ds


def generate_support_images(
    seed: int,
    class_specs: Sequence[ClassSpec],
    focus_class_ids: Sequence[int],
    k: int,
    image_size: int,
    distractors_from: Sequence[int] = (),
    size_range: tuple[int, int] = (22, 52),
) -> DetectionDataset:
    """K dedicated images per focus class, each with exactly one focus
    instance plus 0-2 annotated distractors, so every focus class ends up
    with exactly ``k`` annotations in total (the K-shot budget)."""
    specs = list(class_specs)
    table = class_table_from_specs(specs)
    specs_by_id = {i + 1: s for i, s in enumerate(specs)}
    bad = [c for c in distractors_from if table[c].split == "novel"]
    if bad:
        raise ConfigurationError(f"distractor pool must not contain novel classes: {bad}")
    records = []
    image_id = 0
    for cid in sorted(focus_class_ids):
        for j in range(k):
            canvas = background_texture(
                np.random.default_rng([seed, cid, j, 0]), image_size, image_size).copy()
            rng = np.random.default_rng([seed, cid, j, 1])
            class_list = [cid]
            if distractors_from:
                n_extra = int(rng.integers(0, 3))
                for _ in range(n_extra):
                    class_list.append(int(rng.choice(np.asarray(sorted(distractors_from)))))
            rec = _compose_image(canvas, rng, image_id, class_list, specs_by_id, image_size, size_range)
            if not rec.annotations or rec.annotations[0].class_id != cid:
                raise RuntimeError("focus instance failed to place")  # first placement cannot fail
            records.append(rec)
            image_id += 1
    ds = DetectionDataset(records=records, class_table=table, shot_budget=k)
    _assign_ann_ids(ds)
    validate_dataset(ds)
    return ds


def _assign_ann_ids(ds: DetectionDataset) -> None:
    next_id = 0
    for idx, rec in enumerate(ds.records):
        fresh = []
        for ann in rec.annotations:
            fresh.append(Annotation(class_id=ann.class_id, bbox=ann.bbox, ann_id=next_id))
            next_id += 1
        ds.records[idx] = ImageRecord(image_id=rec.image_id, pixels=rec.pixels, annotations=tuple(fresh))


# ---------------------------------------------------------------------------
# Validation, crops, statistics
# ---------------------------------------------------------------------------

def validate_dataset(ds: DetectionDataset, min_image_size: int = 1) -> None:
    for cid, info in ds.class_table.items():
        if info.split not in ("base", "novel"):
            raise DatasetValidationError(f"class {cid}: unknown split {info.split!r}")
    for rec in ds.records:
        if rec.height < min_image_size or rec.width < min_image_size:
            raise DatasetValidationError(
                f"image {rec.image_id}: size {rec.width}x{rec.height} below minimum {min_image_size}"
            )
        for ann in rec.annotations:
            if ann.class_id not in ds.class_table:
                raise DatasetValidationError(f"image {rec.image_id}: unknown class {ann.class_id}")
            x, y, w, h = ann.bbox
            if w <= 0 or h <= 0:
                raise DatasetValidationError(
                    f"image {rec.image_id} annotation {ann.ann_id}: non-positive box size ({w}, {h})"
                )
            if x < 0 or y < 0 or x + w > rec.width or y + h > rec.height:
                raise DatasetValidationError(
                    f"image {rec.image_id} annotation {ann.ann_id}: box {ann.bbox} outside image"
                )
    if ds.shot_budget is not None:
        by_class = {}
        for rec in ds.records:
            for ann in rec.annotations:
                by_class[ann.class_id] = by_class.get(ann.class_id, 0) + 1
        for cid in ds.novel_class_ids:
            if by_class.get(cid, 0) != ds.shot_budget:
                raise DatasetValidationError(
                    f"novel class {cid} has {by_class.get(cid, 0)} annotations, budget is {ds.shot_budget}"
                )


def extract_support_crop(record: ImageRecord, ann: Annotation, out_size: int = DEFAULT_SUPPORT_SIZE) -> SupportCrop:
    """Crop the annotation's box region and resize it to out_size squared."""
    if ann not in record.annotations:
        raise ValueError(f"annotation {ann} does not belong to image {record.image_id}")
    x, y, w, h = ann.bbox
    x0 = max(0, int(np.floor(x)))
    y0 = max(0, int(np.floor(y)))
    x1 = min(record.width, int(np.ceil(x + w)))
    y1 = min(record.height, int(np.ceil(y + h)))
    region = record.pixels[y0:y1, x0:x1]
    pixels = resize_bilinear(region, out_size, out_size)
    return SupportCrop(class_id=ann.class_id, pixels=pixels, ann_id=ann.ann_id, source_size=(float(w), float(h)))


def dataset_statistics(ds: DetectionDataset) -> tuple[float, float]:
    """(mean annotations per image, mean distinct classes per image)."""
    if not ds.records:
        raise ValueError("dataset is empty")
    m = [len(r.annotations) for r in ds.records]
    c = [len(r.class_ids) for r in ds.records]
    return float(np.mean(m)), float(np.mean(c))


def limit_shots(ds: DetectionDataset, k: int) -> DetectionDataset:
    """Trim every novel class to its first k annotations (record order)."""
    counts = {cid: 0 for cid in ds.novel_class_ids}
    for cid in counts:
        total = sum(1 for rec in ds.records for a in rec.annotations if a.class_id == cid)
        if total < k:
            raise DatasetValidationError(f"novel class {cid} has only {total} annotations, need {k}")
    records = []
    for rec in ds.records:
        kept = []
        for ann in rec.annotations:
            if ann.class_id in counts:
                if counts[ann.class_id] >= k:
                    continue
                counts[ann.class_id] += 1
            kept.append(ann)
        records.append(ImageRecord(image_id=rec.image_id, pixels=rec.pixels, annotations=tuple(kept)))
    return DetectionDataset(records=records, class_table=dict(ds.class_table), shot_budget=k)


# ---------------------------------------------------------------------------
# Annotation-file I/O
# ---------------------------------------------------------------------------

def save_dataset(ds: DetectionDataset, out_dir: str | Path) -> Path:
    """Write images/*.png plus annotations.json in the documented format."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images = []
    annotations = []
    for rec in ds.records:
        file_name = f"images/img_{rec.image_id:05d}.png"
        arr = np.clip(np.round(rec.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / file_name)
        images.append({"id": rec.image_id, "file_name": file_name, "width": rec.width, "height": rec.height})
        for ann in rec.annotations:
            annotations.append({"image_id": rec.image_id, "class_id": ann.class_id, "bbox": list(ann.bbox)})
    classes = [
        {"id": cid, "name": info.name, "split": info.split}
        for cid, info in sorted(ds.class_table.items())
    ]
    payload = {"images": images, "annotations": annotations, "classes": classes}
    path = out / "annotations.json"
    path.write_text(json.dumps(payload, indent=1))
    return path


def load_dataset(
    path: str | Path,
    split_spec: dict[int, str] | None = None,
    load_pixels: bool = True,
    min_image_size: int = 1,
) -> DetectionDataset:
    """Read a dataset from the documented JSON annotation format.

    ``split_spec`` (class id -> "base"/"novel") overrides the file's splits.
    With load_pixels=False the image files are not opened and records carry
    blank pixels (annotation-only use, e.g. evaluation groundtruth).
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetParseError(f"cannot read annotation file {path}: {exc}") from exc
    for key in ("images", "annotations", "classes"):
        if key not in payload:
            raise DatasetParseError(f"{path}: missing top-level key {key!r}")

    class_table: dict[int, ClassInfo] = {}
    for i, entry in enumerate(payload["classes"]):
        try:
            cid, name, split = int(entry["id"]), str(entry["name"]), str(entry["split"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"{path}: classes[{i}] malformed: {entry!r}") from exc
        if split_spec and cid in split_spec:
            split = split_spec[cid]
        if split not in ("base", "novel"):
            raise DatasetValidationError(f"{path}: classes[{i}] (id {cid}): bad split {split!r}")
        if cid in class_table and class_table[cid] != ClassInfo(name, split):
            raise DatasetValidationError(
                f"{path}: class id {cid} declared twice with conflicting name/split"
            )
        class_table[cid] = ClassInfo(name=name, split=split)

    records_by_id: dict[int, dict] = {}
    order: list[int] = []
    for i, entry in enumerate(payload["images"]):
        try:
            image_id = int(entry["id"])
            file_name = str(entry["file_name"])
            width, height = int(entry["width"]), int(entry["height"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"{path}: images[{i}] malformed: {entry!r}") from exc
        if image_id in records_by_id:
            raise DatasetParseError(f"{path}: images[{i}]: duplicate image id {image_id}")
        if load_pixels:
            img_path = path.parent / file_name
            try:
                with Image.open(img_path) as im:
                    pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except OSError as exc:
                raise DatasetParseError(f"{path}: images[{i}]: cannot read {img_path}: {exc}") from exc
            if pixels.shape[:2] != (height, width):
                raise DatasetParseError(
                    f"{path}: images[{i}]: file is {pixels.shape[1]}x{pixels.shape[0]}, "
                    f"header says {width}x{height}"
                )
        else:
            pixels = np.zeros((height, width, 3), dtype=np.float32)
        records_by_id[image_id] = {"pixels": pixels, "annotations": [], "w": width, "h": height}
        order.append(image_id)

    for i, entry in enumerate(payload["annotations"]):
        try:
            image_id = int(entry["image_id"])
            class_id = int(entry["class_id"])
            x, y, w, h = (float(v) for v in entry["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"{path}: annotations[{i}] malformed: {entry!r}") from exc
        if image_id not in records_by_id:
            raise DatasetParseError(f"{path}: annotations[{i}]: unknown image id {image_id}")
        if class_id not in class_table:
            raise DatasetParseError(f"{path}: annotations[{i}]: unknown class id {class_id}")
        rec = records_by_id[image_id]
        # clip to image bounds, then validate
        x0 = max(0.0, x)
        y0 = max(0.0, y)
        x1 = min(float(rec["w"]), x + w)
        y1 = min(float(rec["h"]), y + h)
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            raise DatasetValidationError(
                f"{path}: annotations[{i}]: degenerate box {entry['bbox']} after clipping"
            )
        rec["annotations"].append(
            Annotation(class_id=class_id, bbox=(x0, y0, x1 - x0, y1 - y0), ann_id=i)
        )

    records = [
        ImageRecord(image_id=iid, pixels=records_by_id[iid]["pixels"],
                    annotations=tuple(records_by_id[iid]["annotations"]))
        for iid in order
    ]
    ds = DetectionDataset(records=records, class_table=class_table)
    validate_dataset(ds, min_image_size=min_image_size)
    return ds
