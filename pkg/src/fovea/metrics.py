"""Class/category IoU and instance-weighted iIoU.

Accumulation keeps two confusion matrices over the evaluable classes plus an
"other" prediction column: raw pixel counts and counts weighted by
``avg_size(class) / area(instance)``. Every score is derived from them, so
category-level numbers come from merging rows/columns rather than from a
second pass over the images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import IGNORE_ID, ClassTable, InstanceSet

REGION_KINDS = ("full", "central", "peripheral")


@dataclass(frozen=True)
class RegionMask:
    mask: np.ndarray
    kind: str = "full"


def make_region_mask(width: int, height: int, kind: str = "central", central_frac: float = 0.5) -> RegionMask:
    """Central box of ``floor(central_frac * dim)`` pixels per axis, offset ``(dim - size) // 2``."""
    if kind not in REGION_KINDS:
        raise ValueError(f"region kind {kind!r} not in {REGION_KINDS}")
    if kind == "full":
        return RegionMask(np.ones((height, width), dtype=bool), "full")
    if not 0 < central_frac < 1:
        raise ValueError("central_frac must lie in (0, 1)")
    ch, cw = math.floor(central_frac * height), math.floor(central_frac * width)
    y0, x0 = (height - ch) // 2, (width - cw) // 2
    central = np.zeros((height, width), dtype=bool)
    central[y0:y0 + ch, x0:x0 + cw] = True
    return RegionMask(central if kind == "central" else ~central, kind)


class ConfusionAccumulator:
    def __init__(self, table: ClassTable):
        self.table = table
        self.class_ids = [c.id for c in table if c.evaluable]
        self.k = len(self.class_ids)
        lut = np.full(max(table.ids + [0]) + 1, self.k, dtype=np.int64)  # non-evaluable -> "other"
        for idx, cid in enumerate(self.class_ids):
            lut[cid] = idx
        self._lut = lut
        self.counts = np.zeros((self.k, self.k + 1), dtype=np.int64)
        self.weighted = np.zeros((self.k, self.k + 1))

    def index(self, labels: np.ndarray) -> np.ndarray:
        out = np.full(labels.shape, self.k, dtype=np.int64)
        inside = (labels >= 0) & (labels < len(self._lut))
        out[inside] = self._lut[labels[inside]]
        return out

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.class_ids != self.class_ids:
            raise ValueError("accumulators over different class tables")
        out = ConfusionAccumulator(self.table)
        out.counts = self.counts + other.counts
        out.weighted = self.weighted + other.weighted
        return out

    @property
    def tp(self):
        return np.diag(self.counts[:, :self.k]).copy()

    @property
    def fn(self):
        return self.counts.sum(axis=1) - self.tp

    @property
    def fp(self):
        return self.counts[:, :self.k].sum(axis=0) - self.tp

    @property
    def itp(self):
        return np.diag(self.weighted[:, :self.k]).copy()

    @property
    def ifn(self):
        return self.weighted.sum(axis=1) - self.itp

    def per_class(self) -> dict[int, dict[str, float]]:
        tp, fp, fn, itp, ifn = self.tp, self.fp, self.fn, self.itp, self.ifn
        return {cid: {"tp": int(tp[i]), "fp": int(fp[i]), "fn": int(fn[i]),
                      "itp": float(itp[i]), "ifn": float(ifn[i])}
                for i, cid in enumerate(self.class_ids)}


def pixel_weights(gt: np.ndarray, instances: InstanceSet | None, table: ClassTable) -> np.ndarray:
    """avg_size / area on instance pixels, 1 elsewhere."""
    w = np.ones(gt.shape)
    if instances is None:
        return w
    imap = instances.instance_map
    for k, inst in enumerate(instances.instances):
        if inst.area == 0:
            continue
        avg = table.get(inst.class_id).avg_size
        if avg is None:
            raise ValueError(f"instance {k} of class {inst.class_id}: class has no average size")
        w[imap == k] = avg / inst.area
    return w


def accumulate(pred: np.ndarray, gt: np.ndarray, instances: InstanceSet | None, table: ClassTable,
               mask: RegionMask | None = None, acc: ConfusionAccumulator | None = None) -> ConfusionAccumulator:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if instances is not None and instances.instance_map.shape != gt.shape:
        raise ValueError("instance map does not match ground truth")
    if acc is None:
        acc = ConfusionAccumulator(table)
    sel = gt != IGNORE_ID
    if mask is not None:
        if mask.mask.shape != gt.shape:
            raise ValueError("region mask does not match ground truth")
        sel &= mask.mask
    g = acc.index(gt[sel])
    keep = g < acc.k  # non-evaluable gt behaves like ignore
    g = g[keep]
    p = acc.index(pred[sel][keep])
    w = pixel_weights(gt, instances, table)[sel][keep]
    n = acc.k + 1
    flat = g * n + p
    acc.counts += np.bincount(flat, minlength=acc.k * n).reshape(acc.k, n)
    acc.weighted += np.bincount(flat, weights=w, minlength=acc.k * n).reshape(acc.k, n)
    return acc


def _category_matrix(acc: ConfusionAccumulator, m: np.ndarray):
    cats = acc.table.categories()
    cat_of = [cats.index(acc.table.get(cid).category) for cid in acc.class_ids]
    present = sorted(set(cat_of), key=cat_of.index)
    nc = len(present)
    rows = np.zeros((nc, m.shape[1]))
    for i, c in enumerate(cat_of):
        rows[present.index(c)] += m[i]
    out = np.zeros((nc, nc + 1))
    for j in range(acc.k):
        out[:, present.index(cat_of[j])] += rows[:, j]
    out[:, nc] += rows[:, acc.k]
    return [cats[c] for c in present], out


def _scores(counts, weighted, names, bearing):
    k = counts.shape[0]
    tp = np.diag(counts[:, :k])
    fp = counts[:, :k].sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    itp = np.diag(weighted[:, :k])
    ifn = weighted.sum(axis=1) - itp
    iou_v, iiou_v = {}, {}
    for i, name in enumerate(names):
        denom = tp[i] + fp[i] + fn[i]
        if denom == 0:
            continue  # absent from both prediction and ground truth
        iou_v[name] = float(tp[i] / denom)
        if bearing[i]:
            iiou_v[name] = float(itp[i] / (itp[i] + fp[i] + ifn[i])) if itp[i] + fp[i] + ifn[i] > 0 else 0.0
    return iou_v, iiou_v


def _level_scores(acc: ConfusionAccumulator, level: str):
    if level == "class":
        bearing = [acc.table.get(c).avg_size is not None for c in acc.class_ids]
        return _scores(acc.counts, acc.weighted, acc.class_ids, bearing)
    if level == "category":
        names, counts = _category_matrix(acc, acc.counts)
        _, weighted = _category_matrix(acc, acc.weighted)
        bearing = [any(c.avg_size is not None for c in acc.table if c.category == n and c.evaluable)
                   for n in names]
        return _scores(counts, weighted, names, bearing)
    raise ValueError(f"level must be 'class' or 'category', got {level!r}")


def iou(acc: ConfusionAccumulator, level: str = "class") -> dict:
    """IoU keyed by class id (or category name); empty classes are left out."""
    return _level_scores(acc, level)[0]


def iiou(acc: ConfusionAccumulator, level: str = "class") -> dict:
    """Instance-weighted IoU, reported only for classes that carry instances."""
    return _level_scores(acc, level)[1]


def mean_score(table: dict) -> float:
    return float(np.mean(list(table.values()))) if table else float("nan")


def summarize(acc: ConfusionAccumulator) -> dict:
    return {
        "iou_class": mean_score(iou(acc, "class")),
        "iiou_class": mean_score(iiou(acc, "class")),
        "iou_category": mean_score(iou(acc, "category")),
        "iiou_category": mean_score(iiou(acc, "category")),
    }
