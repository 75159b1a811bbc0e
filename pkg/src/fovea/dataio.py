"""On-disk formats and in-memory containers shared by every stage.

Arrays are plain numpy:

* label maps: ``(H, W)`` integer arrays, :data:`IGNORE_ID` marks unlabeled pixels
* score maps: ``(H, W, L)`` float arrays, ``L >= 2``
* heatmaps: ``(H, W)`` non-negative float arrays
* images: ``(H, W, 3)`` uint8 RGB
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IGNORE_ID = 65535
FVT_MAGIC = b"FVT1"


class FormatError(ValueError):
    """A file exists but its content violates the expected format."""


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class UnsupportedMaxvalError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


# ----------------------------------------------------------------------------
# class table


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    category: str
    avg_size: float | None = None
    evaluable: bool = True

    def __post_init__(self):
        if not self.category:
            raise ValueError(f"class {self.name!r}: empty category name")
        if self.avg_size is not None and not self.avg_size > 0:
            raise ValueError(f"class {self.name!r}: avg_size must be > 0, got {self.avg_size}")
        if not 0 <= self.id < IGNORE_ID:
            raise ValueError(f"class {self.name!r}: id {self.id} out of range")


@dataclass(frozen=True)
class ClassTable:
    classes: tuple[ClassInfo, ...]

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    def __iter__(self):
        return iter(self.classes)

    def __len__(self):
        return len(self.classes)

    def __contains__(self, class_id):
        return any(c.id == class_id for c in self.classes)

    def get(self, class_id: int) -> ClassInfo:
        for c in self.classes:
            if c.id == class_id:
                return c
        raise KeyError(class_id)

    def by_name(self, name: str) -> ClassInfo:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.classes]

    @property
    def num_labels(self) -> int:
        return max(self.ids) + 1

    def categories(self) -> list[str]:
        seen = []
        for c in self.classes:
            if c.category not in seen:
                seen.append(c.category)
        return seen

    def with_avg_sizes(self, sizes: dict[int, float | None]) -> "ClassTable":
        return ClassTable(tuple(replace(c, avg_size=sizes.get(c.id)) for c in self.classes))

    def to_json(self) -> dict:
        return {
            "classes": [
                {"id": c.id, "name": c.name, "category": c.category,
                 "avg_size": c.avg_size, "evaluable": c.evaluable}
                for c in self.classes
            ]
        }


def read_class_table(path) -> ClassTable:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: malformed JSON ({e})") from e
    try:
        classes = tuple(
            ClassInfo(
                id=int(c["id"]), name=str(c["name"]), category=str(c["category"]),
                avg_size=None if c.get("avg_size") is None else float(c["avg_size"]),
                evaluable=bool(c.get("evaluable", True)),
            )
            for c in doc["classes"]
        )
        return ClassTable(classes)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: invalid class table ({e})") from e


def write_class_table(table: ClassTable, path):
    Path(path).write_text(json.dumps(table.to_json(), indent=2) + "\n")


# ----------------------------------------------------------------------------
# label maps (16-bit binary PGM)


def validate_label_map(labels: np.ndarray, table: ClassTable | None = None):
    if labels.ndim != 2 or labels.shape[0] == 0 or labels.shape[1] == 0:
        raise ValueError(f"label map must be a non-empty 2D array, got shape {labels.shape}")
    if table is not None:
        valid = np.isin(labels, table.ids + [IGNORE_ID])
        if not valid.all():
            bad = np.unique(labels[~valid])[:5]
            raise ValueError(f"label values not in class table: {bad.tolist()}")


def _read_pgm_header(buf: bytes, magic: bytes, path):
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{path}: incomplete header")
        tokens.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedHeaderError(f"{path}: header must end with a single whitespace byte")
    pos += 1
    if tokens[0] != magic:
        raise MalformedHeaderError(f"{path}: bad magic {tokens[0]!r}, expected {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedHeaderError(f"{path}: non-integer header field") from None
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"{path}: zero dimension ({width}x{height})")
    return width, height, maxval, pos


def read_label_map(path) -> np.ndarray:
    """Decode a P5 PGM with 16-bit big-endian samples. 65535 is the ignore id."""
    buf = Path(path).read_bytes()
    width, height, maxval, pos = _read_pgm_header(buf, b"P5", path)
    if maxval != 65535:
        raise UnsupportedMaxvalError(f"{path}: maxval {maxval}, expected 65535")
    need = 2 * width * height
    if len(buf) - pos < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(buf) - pos} bytes, expected {need}")
    data = np.frombuffer(buf, dtype=">u2", count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.int64)


def write_label_map(labels: np.ndarray, path):
    labels = np.asarray(labels)
    validate_label_map(labels)
    if labels.min() < 0 or labels.max() > IGNORE_ID:
        raise ValueError("label values must lie in [0, 65535]")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n65535\n" % (w, h))
        f.write(labels.astype(">u2").tobytes())


# ----------------------------------------------------------------------------
# RGB images (binary PPM)


def read_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    width, height, maxval, pos = _read_pgm_header(buf, b"P6", path)
    if maxval != 255:
        raise UnsupportedMaxvalError(f"{path}: maxval {maxval}, expected 255")
    need = 3 * width * height
    if len(buf) - pos < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(buf) - pos} bytes, expected {need}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width, 3).copy()


def write_image(image: np.ndarray, path):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image).tobytes())


# ----------------------------------------------------------------------------
# FVT1 float tensors


def read_tensor(path) -> np.ndarray:
    """Read an FVT1 tensor: rank 2 is a heatmap, rank 3 a score map."""
    buf = Path(path).read_bytes()
    if buf[:4] != FVT_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedPayloadError(f"{path}: missing rank")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if rank not in (2, 3):
        raise MalformedHeaderError(f"{path}: rank {rank} not in {{2, 3}}")
    if len(buf) < 8 + 4 * rank:
        raise TruncatedPayloadError(f"{path}: missing dims")
    dims = struct.unpack_from("<%dI" % rank, buf, 8)
    if min(dims) == 0:
        raise MalformedHeaderError(f"{path}: zero dimension {dims}")
    offset = 8 + 4 * rank
    count = math.prod(dims)
    if len(buf) - offset < 4 * count:
        raise TruncatedPayloadError(f"{path}: payload has {len(buf) - offset} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{path}: non-finite values in payload")
    if rank == 3 and dims[2] < 2:
        raise MalformedHeaderError(f"{path}: score map needs at least 2 labels, got {dims[2]}")
    if rank == 2 and (data < 0).any():
        raise FormatError(f"{path}: heatmap has negative values")
    return data.astype(np.float32)


def write_tensor(t: np.ndarray, path):
    t = np.asarray(t)
    if t.ndim not in (2, 3):
        raise ValueError(f"rank {t.ndim} not in {{2, 3}}")
    if not np.isfinite(t).all():
        raise ValueError("tensor has non-finite values")
    with open(path, "wb") as f:
        f.write(FVT_MAGIC)
        f.write(struct.pack("<I", t.ndim))
        f.write(struct.pack("<%dI" % t.ndim, *t.shape))
        f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


# ----------------------------------------------------------------------------
# instances


@dataclass(frozen=True)
class Instance:
    class_id: int
    area: int
    polygon: tuple[tuple[float, float], ...] | None = None


@dataclass(frozen=True)
class InstanceSet:
    """Instances of one image.

    ``instance_map`` holds, per pixel, the index of the owning instance or -1.
    Areas are cached from it, so an instance fully covered by later ones has
    area 0.
    """

    width: int
    height: int
    instances: tuple[Instance, ...]
    instance_map: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if self.instance_map.shape != (self.height, self.width):
            raise ValueError("instance map shape does not match image dimensions")
        counts = np.bincount(self.instance_map[self.instance_map >= 0].ravel(),
                             minlength=len(self.instances))
        if len(counts) > len(self.instances):
            raise ValueError("instance map references unknown instances")
        for k, inst in enumerate(self.instances):
            if inst.area != counts[k]:
                raise ValueError(f"instance {k}: cached area {inst.area} != raster area {counts[k]}")

    def __len__(self):
        return len(self.instances)

    def __eq__(self, other):
        if not isinstance(other, InstanceSet):
            return NotImplemented
        return (self.width, self.height, self.instances) == (other.width, other.height, other.instances) \
            and np.array_equal(self.instance_map, other.instance_map)

    __hash__ = None

    def mask(self, k: int) -> np.ndarray:
        return self.instance_map == k

    def bbox(self, k: int):
        """Half-open (x0, y0, x1, y1) of instance k's pixels, or None if empty."""
        ys, xs = np.nonzero(self.instance_map == k)
        if len(ys) == 0:
            return None
        return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1

    def area_map(self) -> np.ndarray:
        """Per-pixel area of the owning instance, 0 where uncovered."""
        areas = np.array([inst.area for inst in self.instances] + [0], dtype=np.int64)
        return areas[self.instance_map]  # -1 picks the trailing 0

    def class_map(self) -> np.ndarray:
        ids = np.array([inst.class_id for inst in self.instances] + [IGNORE_ID], dtype=np.int64)
        return ids[self.instance_map]


def fill_polygon(polygon, width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centers.

    Pixel (x, y) is inside when its center (x + 0.5, y + 0.5) lies inside the
    polygon. Edges are taken half-open in y so shared vertices count once.
    """
    pts = np.asarray(polygon, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    x0s, y0s = pts[:, 0], pts[:, 1]
    x1s, y1s = np.roll(x0s, -1), np.roll(y0s, -1)
    ylo = max(0, int(math.floor(y0s.min() - 0.5)))
    yhi = min(height, int(math.ceil(y0s.max() + 0.5)))
    for y in range(ylo, yhi):
        yc = y + 0.5
        crosses = (y0s <= yc) != (y1s <= yc)
        if not crosses.any():
            continue
        xa, ya, xb, yb = x0s[crosses], y0s[crosses], x1s[crosses], y1s[crosses]
        xs = np.sort(xa + (yc - ya) * (xb - xa) / (yb - ya))
        for left, right in zip(xs[0::2], xs[1::2]):
            # centers x + 0.5 in [left, right)
            c0 = max(0, int(math.ceil(left - 0.5)))
            c1 = min(width, int(math.ceil(right - 0.5)))
            if c1 > c0:
                mask[y, c0:c1] = True
    return mask


def rasterize_instances(width: int, height: int, items) -> InstanceSet:
    """Build an InstanceSet from ``(class_id, polygon)`` pairs; later entries win on overlap."""
    imap = np.full((height, width), -1, dtype=np.int64)
    polys = []
    for k, (class_id, polygon) in enumerate(items):
        imap[fill_polygon(polygon, width, height)] = k
        polys.append((class_id, tuple(tuple(float(v) for v in p) for p in polygon)))
    counts = np.bincount(imap[imap >= 0].ravel(), minlength=len(polys))
    instances = tuple(Instance(c, int(counts[k]), p) for k, (c, p) in enumerate(polys))
    return InstanceSet(width, height, instances, imap)


def ingest_polygon_annotations(path, table: ClassTable, width=None, height=None) -> InstanceSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON ({e})") from e
    try:
        width = int(doc["width"]) if width is None else width
        height = int(doc["height"]) if height is None else height
        objects = doc["objects"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: missing field {e}") from e
    if doc.get("width", width) != width or doc.get("height", height) != height:
        raise FormatError(f"{path}: annotation size {doc['width']}x{doc['height']} != {width}x{height}")
    items = []
    for n, obj in enumerate(objects):
        try:
            label, polygon = obj["label"], obj["polygon"]
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path}: objects[{n}] missing field {e}") from e
        try:
            class_id = table.by_name(label).id
        except KeyError:
            raise FormatError(f"{path}: objects[{n}] unknown class name {label!r}") from None
        if not isinstance(polygon, list) or len(polygon) < 3 \
                or any(not isinstance(p, list) or len(p) != 2 for p in polygon):
            raise FormatError(f"{path}: objects[{n}] polygon needs >= 3 [x, y] vertices")
        pts = np.asarray(polygon, dtype=np.float64)
        if not np.isfinite(pts).all():
            raise FormatError(f"{path}: objects[{n}] non-finite vertex")
        if not fill_polygon(pts, width, height).any():
            log.warning("%s: objects[%d] (%s) lies outside the image, skipped", path, n, label)
            continue
        items.append((class_id, polygon))
    return rasterize_instances(width, height, items)


def write_polygon_annotations(instances: InstanceSet, table: ClassTable, path):
    objects = []
    for inst in instances.instances:
        if inst.polygon is None:
            raise ValueError("instance without polygon cannot be serialized")
        objects.append({"label": table.get(inst.class_id).name,
                        "polygon": [list(p) for p in inst.polygon]})
    doc = {"width": instances.width, "height": instances.height, "objects": objects}
    Path(path).write_text(json.dumps(doc) + "\n")


# ----------------------------------------------------------------------------
# detection boxes


@dataclass(frozen=True)
class DetectionBox:
    x0: int
    y0: int
    x1: int
    y1: int
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"empty box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, x, y):
        return (self.x0 <= x) & (x < self.x1) & (self.y0 <= y) & (y < self.y1)

    def clamp(self, width, height) -> "DetectionBox | None":
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return replace(self, x0=x0, y0=y0, x1=x1, y1=y1)

    def to_json(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1,
                "score": self.score, "class_id": self.class_id}


def read_boxes(path, width: int, height: int) -> list[DetectionBox]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed JSON ({e})") from e
    if not isinstance(doc, list):
        raise FormatError(f"{path}: expected a JSON array of boxes")
    boxes = []
    for n, b in enumerate(doc):
        try:
            box = DetectionBox(int(b["x0"]), int(b["y0"]), int(b["x1"]), int(b["y1"]),
                               float(b["score"]), int(b["class_id"]))
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path}: box[{n}] missing field {e}") from e
        except ValueError as e:
            raise FormatError(f"{path}: box[{n}] {e}") from e
        clamped = box.clamp(width, height)
        if clamped is None:
            log.warning("%s: box[%d] has zero area inside the %dx%d image, dropped", path, n, width, height)
            continue
        boxes.append(clamped)
    return boxes


def write_boxes(boxes, path):
    Path(path).write_text(json.dumps([b.to_json() for b in boxes]) + "\n")
