"""Synthetic perspective scenes and a scale-dependent noisy classifier.

Objects are axis-aligned rectangles placed at a depth ``z``: their on-image
size is ``real_size / z`` and their center sits at ``spread / z`` pixels from
the vanishing point, so distant objects are small and crowd around it.

The oracle classifier errs per instance, more often for objects that look
small at the branch's working resolution, and splits large objects with a
block of confusable-class scores.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .dataio import ClassInfo, ClassTable, DetectionBox, InstanceSet, rasterize_instances
from .foveaparse import BranchView

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneClass:
    id: int
    name: str
    category: str
    color: tuple[int, int, int]
    real_size: tuple[float, float] | None = None  # (w, h) in pixels at depth 1; None for background
    confusable: int | None = None

    @property
    def is_background(self):
        return self.real_size is None


DEFAULT_CLASSES = (
    SceneClass(0, "road", "flat", (128, 64, 128)),
    SceneClass(1, "sky", "sky", (70, 130, 180)),
    SceneClass(2, "car", "vehicle", (0, 0, 142), (56.0, 30.0), 3),
    SceneClass(3, "truck", "vehicle", (0, 0, 70), (66.0, 40.0), 4),
    SceneClass(4, "bus", "vehicle", (0, 60, 100), (80.0, 44.0), 3),
    SceneClass(5, "person", "human", (220, 20, 60), (10.0, 26.0), 6),
    SceneClass(6, "rider", "human", (255, 0, 0), (11.0, 28.0), 5),
    SceneClass(7, "pole", "object", (153, 153, 153), (4.0, 40.0), 8),
    SceneClass(8, "sign", "object", (220, 220, 0), (10.0, 10.0), 7),
)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 96
    height: int = 96
    vanishing_point: tuple[float, float] = (48.0, 40.0)
    classes: tuple[SceneClass, ...] = DEFAULT_CLASSES
    num_objects: int = 24
    depth_range: tuple[float, float] = (1.2, 10.0)
    rng_seed: int = 0
    spread: float = 60.0  # distance from the vanishing point at depth 1
    color_noise: int = 12
    max_retries: int = 20

    def __post_init__(self):
        vx, vy = self.vanishing_point
        if not (0 <= vx < self.width and 0 <= vy < self.height):
            raise ValueError(f"vanishing point {self.vanishing_point} outside the image")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ValueError(f"depth range {self.depth_range} must be positive and ordered")
        if not any(c.is_background for c in self.classes):
            raise ValueError("need at least one background class")
        if not any(not c.is_background for c in self.classes):
            raise ValueError("need at least one object class")

    @property
    def num_labels(self):
        return max(c.id for c in self.classes) + 1

    def class_table(self) -> ClassTable:
        return ClassTable(tuple(ClassInfo(c.id, c.name, c.category) for c in self.classes))

    def confusable(self) -> dict[int, int]:
        return {c.id: (c.id if c.confusable is None else c.confusable) for c in self.classes}

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        kw = dict(d)
        if "classes" in kw:
            kw["classes"] = tuple(
                SceneClass(int(c["id"]), c["name"], c.get("category", c["name"]), tuple(c["color"]),
                           None if c.get("real_size") is None else tuple(c["real_size"]),
                           c.get("confusable"))
                for c in kw["classes"])
        for k in ("vanishing_point", "depth_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class OracleConfig:
    rho_max: float = 0.8
    area_ref: float = 32.0
    breakdown_area: float = 800.0
    breakdown_frac: float = 0.25
    margin: float = 2.0
    breakdown_margin: float = 0.5
    noise_std: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if not (0 <= self.rho_max <= 1 and 0 <= self.breakdown_frac <= 1):
            raise ValueError("rho_max and breakdown_frac must lie in [0, 1]")
        if self.area_ref <= 0 or self.breakdown_area <= 0:
            raise ValueError("area_ref and breakdown_area must be > 0")


@dataclass
class Scene:
    image: np.ndarray
    instances: InstanceSet
    gt: np.ndarray
    boxes: list[DetectionBox]
    depths: list[float] = field(default_factory=list)


def projected_size(real_size: tuple[float, float], z: float) -> tuple[float, float]:
    """Pinhole projection: apparent (w, h) in pixels of an object at depth ``z``."""
    if z <= 0:
        raise ValueError("depth must be > 0")
    return real_size[0] / z, real_size[1] / z


def _place(spec: SceneSpec, cls: SceneClass, rng):
    vx, vy = spec.vanishing_point
    for _ in range(spec.max_retries):
        z = math.exp(rng.uniform(math.log(spec.depth_range[0]), math.log(spec.depth_range[1])))
        theta = rng.uniform(-0.15 * math.pi, 1.15 * math.pi)  # mostly below the horizon
        r = spec.spread / z
        cx, cy = vx + r * math.cos(theta), vy + r * math.sin(theta)
        w, h = projected_size(cls.real_size, z)
        x0, x1 = round(cx - w / 2), round(cx + w / 2)
        y0, y1 = round(cy - h / 2), round(cy + h / 2)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, spec.width), min(y1, spec.height)
        if x1 > x0 and y1 > y0:
            return z, (x0, y0, x1, y1)
    return None


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.rng_seed)
    objects = [c for c in spec.classes if not c.is_background]
    placed = []
    for _ in range(spec.num_objects):
        cls = objects[rng.integers(len(objects))]
        hit = _place(spec, cls, rng)
        if hit is None:
            log.warning("seed %d: could not place a %s after %d tries", spec.rng_seed, cls.name, spec.max_retries)
            continue
        placed.append((hit[0], cls, hit[1]))
    placed.sort(key=lambda t: -t[0])  # far to near: nearer objects occlude

    def polygon(r):
        x0, y0, x1, y1 = r
        return [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]

    items = [(cls.id, polygon(r)) for _, cls, r in placed]
    instances = rasterize_instances(spec.width, spec.height, items)
    visible = [k for k, inst in enumerate(instances.instances) if inst.area > 0]
    if len(visible) < len(items):
        items = [items[k] for k in visible]
        placed = [placed[k] for k in visible]
        instances = rasterize_instances(spec.width, spec.height, items)

    backgrounds = [c for c in spec.classes if c.is_background]
    gt = np.full((spec.height, spec.width), backgrounds[0].id, dtype=np.int64)
    if len(backgrounds) > 1:
        gt[: int(spec.vanishing_point[1])] = backgrounds[1].id  # above the horizon
    covered = instances.instance_map >= 0
    gt[covered] = instances.class_map()[covered]

    colors = np.zeros((spec.num_labels, 3))
    for c in spec.classes:
        colors[c.id] = c.color
    noise = rng.integers(-spec.color_noise, spec.color_noise + 1, size=(spec.height, spec.width, 3))
    image = np.clip(colors[gt] + noise, 0, 255).astype(np.uint8)

    boxes = []
    for k, inst in enumerate(instances.instances):
        x0, y0, x1, y1 = instances.bbox(k)
        boxes.append(DetectionBox(x0, y0, x1, y1, 1.0, inst.class_id))
    return Scene(image, instances, gt, boxes, [z for z, _, _ in placed])


# ----------------------------------------------------------------------------
# oracle classifier


def error_rate(area: float, scale: float, cfg: OracleConfig) -> float:
    return cfg.rho_max * min(1.0, cfg.area_ref / (area * scale ** 2))


def breakdown_block(instances: InstanceSet, k: int, cfg: OracleConfig, rng) -> np.ndarray:
    """Mask of a contiguous sub-block covering about ``breakdown_frac`` of instance k."""
    x0, y0, x1, y1 = instances.bbox(k)
    bw, bh = x1 - x0, y1 - y0
    side = math.sqrt(cfg.breakdown_frac)
    w, h = max(1, round(bw * side)), max(1, round(bh * side))
    ox = x0 + int(rng.integers(0, bw - w + 1))
    oy = y0 + int(rng.integers(0, bh - h + 1))
    block = np.zeros(instances.instance_map.shape, dtype=bool)
    block[oy:oy + h, ox:ox + w] = True
    return block & (instances.instance_map == k)


def oracle_decisions(instances: InstanceSet, cfg: OracleConfig, scale: float):
    """Per instance: (misclassified?, breakdown mask or None).

    Each instance draws from its own stream seeded by (seed, index), shared by
    all scales, so a branch at a larger scale errs on a subset of the
    instances a smaller-scale branch errs on.
    """
    out = []
    for k, inst in enumerate(instances.instances):
        rng = np.random.default_rng([cfg.rng_seed, k])
        u = rng.random()
        if inst.area == 0:
            out.append((False, None))
            continue
        wrong = u < error_rate(inst.area, scale, cfg)
        block = None
        if cfg.breakdown_frac > 0 and inst.area * scale ** 2 > cfg.breakdown_area:
            block = breakdown_block(instances, k, cfg, rng)
        out.append((wrong, block))
    return out


def oracle_classify(image: np.ndarray, gt: np.ndarray, instances: InstanceSet, cfg: OracleConfig,
                    scale: float, *, num_labels: int, confusable: dict[int, int]) -> np.ndarray:
    """Noisy one-hot scores at ``gt``'s resolution, as seen by a branch at ``scale``."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    h, w = gt.shape
    if image.shape[:2] != (h, w):
        raise ValueError(f"image {image.shape[:2]} vs ground truth {(h, w)}")
    target = gt.copy()
    block_mask = np.zeros((h, w), dtype=bool)
    conf_map = np.array([confusable.get(c, c) for c in range(num_labels)])
    for k, (wrong, block) in enumerate(oracle_decisions(instances, cfg, scale)):
        if wrong:
            m = instances.instance_map == k
            target[m] = conf_map[gt[m]]
        if block is not None:
            block_mask |= block

    scores = np.full((h, w, num_labels), -cfg.margin)
    rows, cols = np.indices((h, w))
    scores[rows, cols, target] = cfg.margin
    if block_mask.any():
        true_l = gt[block_mask]
        scores[block_mask] = -cfg.margin
        bi = np.flatnonzero(block_mask.ravel())
        flat = scores.reshape(h * w, num_labels)
        flat[bi, true_l] = -cfg.breakdown_margin
        flat[bi, conf_map[true_l]] = cfg.breakdown_margin
    noise_rng = np.random.default_rng([cfg.rng_seed, 1_000_003, int(round(scale * 1000))])
    scores += noise_rng.normal(0.0, cfg.noise_std, size=scores.shape)
    return scores


class OracleClassifier:
    """Pixel classifier backed by a scene's ground truth.

    The fovea branch is classified at full resolution with the branch's scale,
    then cropped and upsampled by pixel replication to the crop's size.
    """

    def __init__(self, scene: Scene, cfg: OracleConfig, num_labels: int, confusable: dict[int, int]):
        self.scene = scene
        self.cfg = cfg
        self.num_labels = num_labels
        self.confusable = confusable
        self.calls = 0

    def __call__(self, image, view: BranchView = BranchView()):
        self.calls += 1
        s = self.scene
        scores = oracle_classify(s.image, s.gt, s.instances, self.cfg, view.scale,
                                 num_labels=self.num_labels, confusable=self.confusable)
        if view.rect is None:
            return scores
        crop = scores[view.rect.slices]
        return np.repeat(np.repeat(crop, view.scale, axis=0), view.scale, axis=1)


def scene_spec_json(spec: SceneSpec) -> str:
    d = {f.name: getattr(spec, f.name) for f in fields(spec)}
    d["classes"] = [c.__dict__ for c in spec.classes]
    return json.dumps(d, sort_keys=True)
