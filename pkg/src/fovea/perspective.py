"""Perspective heatmap targets and fovea localization.

The ground-truth heatmap gives every pixel of an instance the ratio between
its class's average instance size and the instance's own size, so small
(distant) objects light up. A dataset-wide mean of these maps acts as a
global prior, blended in with weight ``delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import ClassTable, InstanceSet
from .resample import resize_bilinear


@dataclass(frozen=True)
class HeatmapGtConfig:
    delta: float = 1.0
    background_value: float = 0.0

    def __post_init__(self):
        if self.delta < 0 or self.background_value < 0:
            raise ValueError("delta and background_value must be >= 0")


@dataclass(frozen=True)
class FoveaRect:
    x0: int
    y0: int
    width: int
    height: int
    mean_score: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"invalid fovea rect {self}")

    @property
    def x1(self):
        return self.x0 + self.width

    @property
    def y1(self):
        return self.y0 + self.height

    @property
    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def fits(self, width, height):
        return self.x1 <= width and self.y1 <= height

    def to_json(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "width": self.width,
                "height": self.height, "mean_score": self.mean_score}

    @classmethod
    def from_json(cls, d) -> "FoveaRect":
        return cls(int(d["x0"]), int(d["y0"]), int(d["width"]), int(d["height"]),
                   float(d.get("mean_score", 0.0)))


def compute_average_sizes(dataset, table: ClassTable) -> ClassTable:
    """Per-class mean pixel area over all visible instances in ``dataset``.

    Instances fully hidden by later ones (area 0) are not counted.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    totals: dict[int, list[int]] = {}
    for instances in dataset:
        for inst in instances.instances:
            if inst.area > 0:
                totals.setdefault(inst.class_id, []).append(inst.area)
    sizes = {cid: math.fsum(a) / len(a) for cid, a in totals.items()}
    return table.with_avg_sizes({c.id: sizes.get(c.id) for c in table})


def heatmap_h(instances: InstanceSet, table: ClassTable, cfg: HeatmapGtConfig = HeatmapGtConfig()) -> np.ndarray:
    ratios = np.zeros(len(instances) + 1)
    ratios[-1] = cfg.background_value
    for k, inst in enumerate(instances.instances):
        if inst.area == 0:
            continue  # owns no pixels
        avg = table.get(inst.class_id).avg_size
        if avg is None:
            raise ValueError(f"class {inst.class_id} has no average instance size")
        ratios[k] = avg / inst.area
    return ratios[instances.instance_map]


def global_prior(heatmaps, out_width: int, out_height: int) -> np.ndarray:
    if len(heatmaps) == 0:
        raise ValueError("no heatmaps given")
    acc = np.zeros((out_height, out_width))
    for h in heatmaps:  # fixed order keeps the sum bit-stable
        acc += resize_bilinear(h, out_height, out_width)
    return acc / len(heatmaps)


def heatmap_v(h: np.ndarray, g: np.ndarray, delta: float) -> np.ndarray:
    if h.shape != g.shape:
        raise ValueError(f"heatmap shapes differ: {h.shape} vs {g.shape}")
    if delta == 0:
        return np.array(h, dtype=np.float64)
    return h + delta * g


def smoothed_l1(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"heatmap shapes differ: {pred.shape} vs {gt.shape}")
    x = np.abs(np.asarray(pred, dtype=np.float64) - gt)
    return float(np.where(x < 1, 0.5 * x * x, x - 0.5).mean())


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _positions(n, win, stride):
    pos = list(range(0, n - win + 1, stride))
    if pos[-1] != n - win:
        pos.append(n - win)
    return np.array(pos)


def locate_fovea(heatmap: np.ndarray, win_frac_w: float = 0.5, win_frac_h: float = 0.5,
                 stride: int = 1) -> FoveaRect:
    """Slide a fixed-size averaging window over the heatmap and keep the best one.

    Means closer to the best than the summed-area table's rounding error count
    as ties; ties go to the smallest y0, then x0.
    """
    if not (0 < win_frac_w <= 1 and 0 < win_frac_h <= 1):
        raise ValueError("window fractions must lie in (0, 1]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = heatmap.shape
    wh = max(1, _round_half_up(win_frac_h * h))
    ww = max(1, _round_half_up(win_frac_w * w))
    if wh > h or ww > w:
        raise ValueError(f"window {ww}x{wh} larger than heatmap {w}x{h}")

    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = np.asarray(heatmap, dtype=np.float64).cumsum(0).cumsum(1)
    ys = _positions(h, wh, stride)
    xs = _positions(w, ww, stride)
    y0, x0 = ys[:, None], xs[None, :]
    sums = sat[y0 + wh, x0 + ww] - sat[y0, x0 + ww] - sat[y0 + wh, x0] + sat[y0, x0]
    means = sums / (wh * ww)
    best = means.max()
    tol = 16 * np.finfo(np.float64).eps * np.abs(sat[-1]).max() / (wh * ww)
    iy, ix = np.argwhere(means >= best - tol)[0]  # argwhere is row-major: smallest y0, then x0
    ry, rx = int(ys[iy]), int(xs[ix])
    mean = float(heatmap[ry:ry + wh, rx:rx + ww].mean())
    return FoveaRect(rx, ry, ww, wh, mean)
