"""File formats shared across the toolkit and the feature exporter.

Tensor container layout (all integers little-endian):

    magic   4 bytes  "VFMT"
    version u32      currently 1
    dtype   u32      1 = 32-bit float, little-endian
    ndim    u32
    dims    ndim x u64
    payload product(dims) x 4 bytes, row-major

The reader validates magic, version, dtype, and the payload length
against the actual buffer before allocating anything, so arbitrary input
bytes fail with a structured error instead of a crash or a huge
allocation. Annotation and detection files follow the common COCO-style
JSON field layout.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import (
    FormatError,
    SchemaError,
    TruncationError,
    UnsupportedDtype,
    ValidationFailure,
    VersionError,
)
from .tensor import Tensor

_MODULE = "io"

logger = logging.getLogger("vfm4sdg.io")

MAGIC = b"VFMT"
FORMAT_VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sIII")


def encode_tensor(values) -> bytes:
    """Serialize an array (cast to float32) into the container format."""
    # astype (not ascontiguousarray) keeps 0-d scalars 0-dimensional.
    arr = np.asarray(values, dtype=np.float64).astype("<f4")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + dims + arr.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    """Parse container bytes into a float32 array, validating as it goes."""
    if len(buf) < _HEADER.size:
        raise TruncationError(
            _MODULE,
            f"header needs {_HEADER.size} bytes, got {len(buf)}",
        )
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(_MODULE, f"bad magic {magic!r} at byte offset 0")
    if version != FORMAT_VERSION:
        raise VersionError(
            _MODULE, f"unsupported container version {version} (expected {FORMAT_VERSION})"
        )
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(_MODULE, f"unknown dtype code {dtype}")
    dims_end = _HEADER.size + 8 * ndim
    if len(buf) < dims_end:
        raise TruncationError(
            _MODULE,
            f"dims table needs {dims_end} bytes, got {len(buf)}",
        )
    dims = struct.unpack_from(f"<{ndim}Q", buf, _HEADER.size) if ndim else ()
    count = 1
    for d in dims:
        if d == 0:
            raise FormatError(_MODULE, f"zero-sized dimension in dims {dims}")
        count *= d
    expected = dims_end + 4 * count
    if len(buf) != expected:
        raise TruncationError(
            _MODULE,
            f"payload length mismatch: expected {expected} bytes total, got {len(buf)}",
        )
    payload = np.frombuffer(buf, dtype="<f4", offset=dims_end, count=count)
    return payload.reshape(dims).copy()


def write_tensor(path, tensor) -> None:
    values = tensor.data if isinstance(tensor, Tensor) else tensor
    Path(path).write_bytes(encode_tensor(values))


def read_tensor(path) -> Tensor:
    """Load a tensor file; data is promoted to float64 for computation."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(_MODULE, f"cannot read {path}: {exc}") from exc
    return Tensor(decode_tensor(buf).astype(np.float64))


# ---------------------------------------------------------------------------
# annotation / detection records
# ---------------------------------------------------------------------------

Box = tuple  # (x, y, w, h) in image pixels, top-left origin


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    domain_tag: str = ""


@dataclass(frozen=True)
class BoxAnnotation:
    image_id: int
    bbox: Box
    category_id: int


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class Detection:
    image_id: int
    bbox: Box
    category_id: int
    score: float


@dataclass
class AnnotationSet:
    images: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    categories: list = field(default_factory=list)

    def image_by_id(self) -> dict:
        return {im.id: im for im in self.images}

    def category_by_id(self) -> dict:
        return {c.id: c for c in self.categories}


def _require(obj, key: str, path: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(_MODULE, f"missing required field at {path}.{key}")
    return obj[key]


def _require_list(obj: dict, key: str, path: str) -> list:
    value = _require(obj, key, path)
    if not isinstance(value, list):
        raise SchemaError(_MODULE, f"{path}.{key} must be a JSON array")
    return value


def _as_box(value, path: str) -> Box:
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise SchemaError(_MODULE, f"{path} must be a 4-element [x, y, w, h] box")
    x, y, w, h = (float(v) for v in value)
    if w <= 0 or h <= 0:
        raise ValidationFailure(_MODULE, f"{path} has non-positive width/height ({w}, {h})")
    return (x, y, w, h)


def _load_json(source: Union[str, Path, dict, list], kind: str):
    if isinstance(source, (dict, list)):
        return source
    try:
        text = Path(source).read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(_MODULE, f"cannot read {kind} file {source}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(_MODULE, f"{kind} file {source} is not valid JSON: {exc}") from exc


_KNOWN_TOP_LEVEL = {"images", "annotations", "categories"}


def parse_annotations(source) -> AnnotationSet:
    """Parse and cross-validate a COCO-style annotation file or dict."""
    doc = _load_json(source, "annotation")
    if not isinstance(doc, dict):
        raise SchemaError(_MODULE, "annotation document must be a JSON object")
    for key in doc:
        if key not in _KNOWN_TOP_LEVEL:
            logger.warning("ignoring unknown top-level key %r in annotation file", key)

    images = []
    for i, entry in enumerate(_require_list(doc, "images", "$")):
        path = f"$.images[{i}]"
        info = ImageInfo(
            id=int(_require(entry, "id", path)),
            width=int(_require(entry, "width", path)),
            height=int(_require(entry, "height", path)),
            domain_tag=str(entry.get("domain_tag", "")),
        )
        if info.width < 1 or info.height < 1:
            raise ValidationFailure(_MODULE, f"{path} has non-positive size")
        images.append(info)
    image_ids = {im.id for im in images}
    if len(image_ids) != len(images):
        raise ValidationFailure(_MODULE, "duplicate image ids in annotation file")

    categories = []
    for i, entry in enumerate(_require_list(doc, "categories", "$")):
        path = f"$.categories[{i}]"
        categories.append(
            Category(id=int(_require(entry, "id", path)), name=str(_require(entry, "name", path)))
        )
    cat_ids = {c.id for c in categories}
    if len(cat_ids) != len(categories):
        raise ValidationFailure(_MODULE, "duplicate category ids in annotation file")
    if len({c.name for c in categories}) != len(categories):
        raise ValidationFailure(_MODULE, "category names must be unique")

    image_by_id = {im.id: im for im in images}
    annotations = []
    for i, entry in enumerate(_require_list(doc, "annotations", "$")):
        path = f"$.annotations[{i}]"
        image_id = int(_require(entry, "image_id", path))
        category_id = int(_require(entry, "category_id", path))
        bbox = _as_box(_require(entry, "bbox", path), f"{path}.bbox")
        if image_id not in image_ids:
            raise ValidationFailure(_MODULE, f"{path} references unknown image_id {image_id}")
        if category_id not in cat_ids:
            raise ValidationFailure(
                _MODULE, f"{path} references unknown category_id {category_id}"
            )
        im = image_by_id[image_id]
        if bbox[0] >= im.width or bbox[1] >= im.height or bbox[0] + bbox[2] <= 0 or bbox[1] + bbox[3] <= 0:
            raise ValidationFailure(
                _MODULE, f"{path} box {bbox} lies fully outside image {image_id}"
            )
        annotations.append(BoxAnnotation(image_id=image_id, bbox=bbox, category_id=category_id))

    return AnnotationSet(images=images, annotations=annotations, categories=categories)


def parse_detections(source) -> list:
    """Parse a detection-results file or list (COCO results layout)."""
    doc = _load_json(source, "detection")
    if not isinstance(doc, list):
        raise SchemaError(_MODULE, "detection document must be a JSON array")
    detections = []
    for i, entry in enumerate(doc):
        path = f"$[{i}]"
        score = float(_require(entry, "score", path))
        if not 0.0 <= score <= 1.0:
            raise ValidationFailure(_MODULE, f"{path}.score {score} outside [0, 1]")
        detections.append(
            Detection(
                image_id=int(_require(entry, "image_id", path)),
                bbox=_as_box(_require(entry, "bbox", path), f"{path}.bbox"),
                category_id=int(_require(entry, "category_id", path)),
                score=score,
            )
        )
    return detections


def dump_json(payload, path: Optional[Union[str, Path]] = None) -> str:
    """Serialize a report deterministically; optionally write it to disk."""
    text = json.dumps(payload, sort_keys=True, indent=2)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text
