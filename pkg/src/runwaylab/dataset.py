"""Dataset model: samples, per-airport balancing, splits, manifest and COCO I/O.

Manifests are JSON with an explicit schema version; image paths inside a
manifest are relative to the manifest's directory. In-memory image_refs are
plain paths, openable as given.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image as PILImage

from .geometry import BBox

MANIFEST_SCHEMA_VERSION = 1


class Domain(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class Condition(str, Enum):
    DAY = "day"
    NIGHT = "night"


class DatasetError(Exception):
    pass


class SchemaError(DatasetError):
    def __init__(self, field: str, detail: str = ""):
        self.field = field
        super().__init__(f"manifest schema error on field {field!r}" + (f": {detail}" if detail else ""))


class InsufficientAirportImages(DatasetError):
    def __init__(self, airport_id: str, have: int, need: int):
        self.airport_id = airport_id
        self.have = have
        self.need = need
        super().__init__(f"airport {airport_id!r} has {have} images, need {need}")


class EmptySplit(DatasetError):
    pass


class UnlabeledSample(DatasetError):
    pass


@dataclass(frozen=True)
class Sample:
    image_ref: str
    bbox: Optional[BBox]
    domain: Domain
    condition: Condition
    airport_id: str


@dataclass(frozen=True)
class Dataset:
    """Immutable ordered collection of samples."""

    samples: tuple[Sample, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        refs = [s.image_ref for s in self.samples]
        if len(set(refs)) != len(refs):
            raise DatasetError("duplicate image_refs in dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def airports(self) -> list[str]:
        return sorted({s.airport_id for s in self.samples})

    def by_airport(self) -> dict[str, list[Sample]]:
        groups: dict[str, list[Sample]] = {}
        for s in self.samples:
            groups.setdefault(s.airport_id, []).append(s)
        return groups


def build_balanced(pool: Dataset, per_airport: int, seed: int) -> Dataset:
    """Exactly per_airport samples per airport, chosen by seeded shuffle.

    Airports are processed in lexicographic order so the construction is
    reproducible across platforms; output order is airport order, then
    draw order.
    """
    if per_airport <= 0:
        raise ValueError("per_airport must be positive")
    groups = pool.by_airport()
    rng = np.random.default_rng(seed)
    chosen: list[Sample] = []
    for airport in sorted(groups):
        group = groups[airport]
        if len(group) < per_airport:
            raise InsufficientAirportImages(airport, len(group), per_airport)
        perm = rng.permutation(len(group))[:per_airport]
        chosen.extend(group[i] for i in perm)
    return Dataset(tuple(chosen), name=f"{pool.name}-balanced{per_airport}")


def split_by_airport(pool: Dataset, validation_airports: Iterable[str]) -> tuple[Dataset, Dataset]:
    """Partition by airport id; validation airports never leak into train."""
    val_ids = set(validation_airports)
    if not val_ids:
        raise ValueError("validation_airports must be non-empty")
    val = tuple(s for s in pool.samples if s.airport_id in val_ids)
    train = tuple(s for s in pool.samples if s.airport_id not in val_ids)
    if not train or not val:
        raise EmptySplit(f"split left train={len(train)}, val={len(val)} samples")
    return (Dataset(train, name=f"{pool.name}-train"), Dataset(val, name=f"{pool.name}-val"))


def _sample_to_record(s: Sample, manifest_dir: str) -> dict:
    try:
        ref = os.path.relpath(s.image_ref, manifest_dir)
    except ValueError:
        ref = s.image_ref
    return {
        "image": ref,
        "bbox": list(s.bbox.as_tuple()) if s.bbox is not None else None,
        "domain": s.domain.value,
        "condition": s.condition.value,
        "airport_id": s.airport_id,
    }


def save_manifest(d: Dataset, path: str | Path) -> None:
    path = Path(path)
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "name": d.name,
        "samples": [_sample_to_record(s, str(path.parent)) for s in d.samples],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _require(rec: dict, field: str, types) -> object:
    if field not in rec:
        raise SchemaError(field, "missing")
    value = rec[field]
    if not isinstance(value, types):
        raise SchemaError(field, f"expected {types}, got {type(value).__name__}")
    return value


def _record_to_sample(rec: dict, manifest_dir: str) -> Sample:
    if not isinstance(rec, dict):
        raise SchemaError("samples", "sample record is not an object")
    ref = _require(rec, "image", str)
    if "bbox" not in rec:
        raise SchemaError("bbox", "missing")
    raw_bbox = rec["bbox"]
    if raw_bbox is None:
        bbox = None
    elif isinstance(raw_bbox, list) and len(raw_bbox) == 4 \
            and all(isinstance(v, (int, float)) for v in raw_bbox):
        bbox = BBox(*[float(v) for v in raw_bbox])
    else:
        raise SchemaError("bbox", "expected null or [xmin, ymin, xmax, ymax]")
    try:
        domain = Domain(_require(rec, "domain", str))
    except ValueError:
        raise SchemaError("domain", f"unknown value {rec['domain']!r}")
    try:
        condition = Condition(_require(rec, "condition", str))
    except ValueError:
        raise SchemaError("condition", f"unknown value {rec['condition']!r}")
    airport = _require(rec, "airport_id", str)
    return Sample(
        image_ref=os.path.normpath(os.path.join(manifest_dir, ref)),
        bbox=bbox,
        domain=domain,
        condition=condition,
        airport_id=airport,
    )


def load_manifest(path: str | Path, check_images: bool = True) -> Dataset:
    """Load a manifest; unknown keys are ignored, missing required keys rejected."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise SchemaError("schema_version", "manifest root is not an object")
    version = _require(doc, "schema_version", int)
    if version > MANIFEST_SCHEMA_VERSION:
        raise SchemaError("schema_version", f"unsupported version {version}")
    name = doc.get("name", "")
    if not isinstance(name, str):
        raise SchemaError("name", "expected string")
    raw_samples = _require(doc, "samples", list)
    samples = tuple(_record_to_sample(rec, str(path.parent)) for rec in raw_samples)
    if check_images:
        for s in samples:
            if not os.path.exists(s.image_ref):
                raise FileNotFoundError(f"manifest references missing image {s.image_ref}")
    return Dataset(samples, name=name)


def export_coco(d: Dataset, path: str | Path) -> None:
    """COCO-style annotation JSON with the single category "runway" (id 1)."""
    images = []
    annotations = []
    for idx, s in enumerate(d.samples, start=1):
        if s.bbox is None:
            raise UnlabeledSample(f"sample {s.image_ref} has no bbox")
        with PILImage.open(s.image_ref) as im:
            width, height = im.size
        images.append({
            "id": idx,
            "file_name": os.path.basename(s.image_ref),
            "width": width,
            "height": height,
        })
        annotations.append({
            "id": idx,
            "image_id": idx,
            "category_id": 1,
            "bbox": [s.bbox.xmin, s.bbox.ymin, s.bbox.width, s.bbox.height],
            "area": s.bbox.area,
            "iscrowd": 0,
        })
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "runway"}],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
