"""Fully connected CRF with a perspective-dependent pairwise weight.

Energy of a labeling::

    E(l) = sum_i U[i, l_i] + sum_{i<j} mu(i, j) * [l_i != l_j] * kappa(f_i, f_j)

``kappa`` is the usual appearance + smoothness Gaussian pair. ``mu`` couples a
pair only through the highest-scoring detection box containing both pixels,
and shrinks the coupling for boxes whose heatmap mean is high (small, distant
objects) relative to the whole heatmap.

Inference is exact-message mean field: messages are computed by brute force
over pixel pairs, restricted to box interiors when pairs outside boxes carry
no weight.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .dataio import IGNORE_ID

log = logging.getLogger(__name__)

# entries of a cached pairwise matrix before falling back to per-iteration blocks
_MAX_CACHED = 40_000_000
_BLOCK_ROWS = 256


@dataclass(frozen=True)
class CrfParams:
    w1: float = 3.0
    w2: float = 1.0
    theta_alpha: float = 30.0
    theta_beta: float = 20.0
    theta_gamma: float = 3.0
    iterations: int = 10
    mu_fallback: float = 0.0
    mu_max: float = 1e4
    epsilon_mean: float = 1e-6

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be >= 0")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel bandwidths must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mu_fallback < 0 or self.mu_max <= 0 or self.epsilon_mean <= 0:
            raise ValueError("mu_fallback >= 0, mu_max > 0 and epsilon_mean > 0 required")


class PixelFeature(NamedTuple):
    position: tuple[float, float]  # (x, y)
    color: tuple[float, float, float]


@dataclass(frozen=True)
class PixelFeatures:
    """Per-pixel features of a whole image, flattened row-major."""

    width: int
    height: int
    positions: np.ndarray  # (N, 2) as (x, y)
    colors: np.ndarray  # (N, 3)

    def __getitem__(self, i) -> PixelFeature:
        return PixelFeature(tuple(self.positions[i]), tuple(self.colors[i]))


def pixel_features(image: np.ndarray) -> PixelFeatures:
    h, w = image.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    return PixelFeatures(w, h, pos, image.reshape(-1, 3).astype(np.float64))


@dataclass
class Marginals:
    q: np.ndarray  # (H, W, L)

    @property
    def width(self):
        return self.q.shape[1]

    @property
    def height(self):
        return self.q.shape[0]

    @property
    def num_labels(self):
        return self.q.shape[2]

    def argmax(self) -> np.ndarray:
        return self.q.argmax(axis=2)


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def unary_from_scores(scores: np.ndarray) -> np.ndarray:
    """Negative log-softmax over the label axis."""
    s = np.asarray(scores, dtype=np.float64)
    m = s.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(s - m).sum(axis=-1, keepdims=True))
    return lse - s


def kappa(fi: PixelFeature, fj: PixelFeature, params: CrfParams) -> float:
    dp = sum((a - b) ** 2 for a, b in zip(fi.position, fj.position))
    dc = sum((a - b) ** 2 for a, b in zip(fi.color, fj.color))
    return (params.w1 * math.exp(-dp / (2 * params.theta_alpha ** 2) - dc / (2 * params.theta_beta ** 2))
            + params.w2 * math.exp(-dp / (2 * params.theta_gamma ** 2)))


def _kappa_block(pos_a, col_a, pos_b, col_b, params: CrfParams):
    dp = ((pos_a[:, None, :] - pos_b[None, :, :]) ** 2).sum(-1)
    dc = ((col_a[:, None, :] - col_b[None, :, :]) ** 2).sum(-1)
    k = np.zeros_like(dp)
    if params.w1:
        k += params.w1 * np.exp(-dp / (2 * params.theta_alpha ** 2) - dc / (2 * params.theta_beta ** 2))
    if params.w2:
        k += params.w2 * np.exp(-dp / (2 * params.theta_gamma ** 2))
    return k


# ----------------------------------------------------------------------------
# spatial support weight


def _exact_sum(values: np.ndarray) -> Fraction:
    """Exact rational sum of float64 values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if not np.isfinite(v).all():
        raise ValueError("heatmap has non-finite values")
    mant, exp = np.frexp(v)
    m = (mant * 2.0 ** 53).astype(np.int64)  # exact: 53-bit significands
    e = exp.astype(np.int64) - 53
    hi, lo = m >> 26, m & ((1 << 26) - 1)
    emin = int(e.min()) if len(e) else 0
    total = 0
    for ex in np.unique(e):
        sel = e == ex
        part = (int(hi[sel].sum()) << 26) + int(lo[sel].sum())
        total += part << int(ex - emin)
    return Fraction(total) * Fraction(2) ** emin


class BoxSupport:
    """Per-box mu values of one image, ordered by selection priority."""

    def __init__(self, boxes, heatmap: np.ndarray, params: CrfParams):
        self.boxes = list(boxes)
        heatmap = np.asarray(heatmap, dtype=np.float64)
        self.height, self.width = heatmap.shape
        g_mean = _exact_sum(heatmap) / heatmap.size
        eps = Fraction(params.epsilon_mean)
        self.values = []
        for b in self.boxes:
            region = heatmap[b.y0:b.y1, b.x0:b.x1]
            if region.size == 0:
                raise ValueError(f"box {b} lies outside the {self.width}x{self.height} heatmap")
            b_mean = max(_exact_sum(region) / region.size, eps)
            mu = Fraction(b.score) * g_mean / b_mean
            self.values.append(min(max(float(mu), 0.0), params.mu_max))
        # highest score first, input order breaks ties
        self.priority = sorted(range(len(self.boxes)), key=lambda k: (-self.boxes[k].score, k))
        self.fallback = params.mu_fallback

    def for_pair(self, pi, pj) -> float:
        for k in self.priority:
            b = self.boxes[k]
            if b.contains(*pi) and b.contains(*pj):
                return self.values[k]
        return self.fallback

    def block(self, pos_a, pos_b) -> np.ndarray:
        """mu for every pair (a, b) of the given (x, y) positions."""
        mu = np.full((len(pos_a), len(pos_b)), self.fallback)
        for k in reversed(self.priority):  # higher priority written last
            b = self.boxes[k]
            ia = b.contains(pos_a[:, 0], pos_a[:, 1])
            ib = b.contains(pos_b[:, 0], pos_b[:, 1])
            if ia.any() and ib.any():
                mu[np.ix_(ia, ib)] = self.values[k]
        return mu

    def covered(self, positions) -> np.ndarray:
        m = np.zeros(len(positions), dtype=bool)
        for b in self.boxes:
            m |= b.contains(positions[:, 0], positions[:, 1])
        return m


def mu(pi, pj, boxes, heatmap: np.ndarray, params: CrfParams) -> float:
    """Spatial support weight of the pixel pair at (x, y) coordinates pi, pj."""
    return BoxSupport(boxes, heatmap, params).for_pair(pi, pj)


# ----------------------------------------------------------------------------
# pairwise operator


class PairwiseOperator:
    """The symmetric matrix W[i, j] = mu(i, j) * kappa(f_i, f_j), W[i, i] = 0.

    Only rows/columns in ``active`` can be non-zero. With a zero fallback these
    are the box-covered pixels, which is exact, not an approximation.
    """

    def __init__(self, features: PixelFeatures, boxes, heatmap, params: CrfParams):
        self.params = params
        self.n = len(features.positions)
        self.support = BoxSupport(boxes, heatmap, params)
        self.features = features
        if params.w1 == 0 and params.w2 == 0:
            self.active = np.zeros(0, dtype=np.int64)
        elif params.mu_fallback > 0:
            self.active = np.arange(self.n)
        else:
            self.active = np.flatnonzero(self.support.covered(features.positions))
        self._dense = None
        if len(self.active) ** 2 <= _MAX_CACHED:
            self._dense = np.vstack([blk for _, blk in self._blocks()]) if len(self.active) else \
                np.zeros((0, 0))

    def _blocks(self):
        a = self.active
        pos, col = self.features.positions[a], self.features.colors[a]
        for start in range(0, len(a), _BLOCK_ROWS):
            sl = slice(start, start + _BLOCK_ROWS)
            w = self.support.block(pos[sl], pos) * _kappa_block(pos[sl], col[sl], pos, col, self.params)
            rows = np.arange(start, min(start + _BLOCK_ROWS, len(a)))
            w[rows - start, rows] = 0.0
            yield sl, w

    def apply(self, q: np.ndarray) -> np.ndarray:
        """Messages m[i, l] = sum_{j != i} W[i, j] q[j, l] for flattened (N, L) q."""
        out = np.zeros_like(q)
        if len(self.active) == 0:
            return out
        qa = q[self.active]
        if self._dense is not None:
            out[self.active] = self._dense @ qa
        else:
            res = np.empty_like(qa)
            for sl, w in self._blocks():
                res[sl] = w @ qa
            out[self.active] = res
        return out

    def disagreement(self, labels: np.ndarray, valid: np.ndarray) -> float:
        """sum_{i<j} W[i, j] [l_i != l_j] over valid pixels."""
        if len(self.active) == 0:
            return 0.0
        la = labels[self.active]
        va = valid[self.active]
        total = 0.0
        blocks = [(slice(0, len(la)), self._dense)] if self._dense is not None else self._blocks()
        for sl, w in blocks:
            diff = (la[sl, None] != la[None, :]) & va[sl, None] & va[None, :]
            total += float((w * diff).sum())
        return total / 2


def _flat(features, unary, heatmap):
    h, w, n_labels = unary.shape
    if (features.height, features.width) != (h, w) or heatmap.shape != (h, w):
        raise ValueError(f"inconsistent sizes: unary {unary.shape[:2]}, "
                         f"features {(features.height, features.width)}, heatmap {heatmap.shape}")
    return unary.reshape(h * w, n_labels)


def energy(labels: np.ndarray, unary: np.ndarray, features: PixelFeatures, boxes, heatmap,
           params: CrfParams, op: PairwiseOperator | None = None) -> float:
    """CRF energy of ``labels``; pixels labeled IGNORE_ID are left out of both terms."""
    if labels.shape != unary.shape[:2]:
        raise ValueError(f"labels {labels.shape} vs unary {unary.shape[:2]}")
    u = _flat(features, unary, heatmap)
    flat = labels.ravel()
    valid = flat != IGNORE_ID
    if (flat[valid] >= u.shape[1]).any() or (flat[valid] < 0).any():
        raise ValueError("labels outside the unary's label range")
    unary_sum = float(u[np.flatnonzero(valid), flat[valid]].sum())
    if op is None:
        op = PairwiseOperator(features, boxes, heatmap, params)
    return unary_sum + op.disagreement(flat, valid)


def mean_field(unary: np.ndarray, features: PixelFeatures, boxes, heatmap, params: CrfParams,
               callback=None, op: PairwiseOperator | None = None) -> Marginals:
    """Parallel mean-field updates from Q = softmax(-U).

    ``callback(iteration, marginals)`` runs after each update when given.
    """
    h, w, n_labels = unary.shape
    u = _flat(features, unary, heatmap)
    if op is None:
        op = PairwiseOperator(features, boxes, heatmap, params)
    q = _softmax(-u)
    for it in range(params.iterations):
        m = op.apply(q)
        pairwise = m.sum(axis=1, keepdims=True) - m  # Potts: sum over l' != l
        logits = -u - pairwise
        if not np.isfinite(logits).all():
            raise FloatingPointError(f"non-finite mean-field logits at iteration {it}")
        q = _softmax(logits)
        if callback is not None:
            callback(it, Marginals(q.reshape(h, w, n_labels)))
    return Marginals(q.reshape(h, w, n_labels))


def refine(scores: np.ndarray, image: np.ndarray, boxes, heatmap, params: CrfParams,
           callback=None) -> np.ndarray:
    unary = unary_from_scores(scores)
    q = mean_field(unary, pixel_features(image), boxes, heatmap, params, callback=callback)
    return q.argmax()


def exact_map(unary: np.ndarray, features: PixelFeatures, boxes, heatmap, params: CrfParams,
              max_pixels: int = 16):
    """Global minimum-energy labeling by exhaustive enumeration.

    Ties go to the lexicographically first labeling (pixel 0 most significant).
    """
    h, w, n_labels = unary.shape
    n = h * w
    if n > max_pixels or n_labels ** n > 5e7:
        raise ValueError(f"{n} pixels x {n_labels} labels too large for enumeration")
    u = _flat(features, unary, heatmap)
    op = PairwiseOperator(features, boxes, heatmap, params)
    wfull = np.zeros((n, n))
    if len(op.active):
        wfull[np.ix_(op.active, op.active)] = op._dense

    if n_labels ** n <= 4096:
        best, best_e = None, math.inf
        valid = np.ones(n, dtype=bool)
        for lab in itertools.product(range(n_labels), repeat=n):
            lab = np.array(lab)
            e = float(u[np.arange(n), lab].sum()) + op.disagreement(lab, valid)
            if e < best_e:
                best, best_e = lab, e
        return best.reshape(h, w), best_e

    # split the pixels in two halves and combine their enumerations with matmuls
    a, b = np.arange(n // 2), np.arange(n // 2, n)
    la = np.array(list(itertools.product(range(n_labels), repeat=len(a))))
    lb = np.array(list(itertools.product(range(n_labels), repeat=len(b))))

    def half_energy(idx, labs):
        un = u[idx][np.arange(len(idx)), labs].sum(axis=1)
        waa = wfull[np.ix_(idx, idx)]
        same = sum(((labs == l) @ waa * (labs == l)).sum(axis=1) for l in range(n_labels)) / 2
        return un + waa.sum() / 2 - same

    ea, eb = half_energy(a, la), half_energy(b, lb)
    wab = wfull[np.ix_(a, b)]
    cross_total = wab.sum()
    onehot_b = [(lb == l).astype(np.float64) for l in range(n_labels)]
    best_e, best_idx = math.inf, None
    for start in range(0, len(la), 512):
        rows = la[start:start + 512]
        same = np.zeros((len(rows), len(lb)))
        for l in range(n_labels):
            same += ((rows == l) @ wab) @ onehot_b[l].T
        e = ea[start:start + 512, None] + eb[None, :] + cross_total - same
        k = int(np.argmin(e))
        if e.flat[k] < best_e:
            best_e = float(e.flat[k])
            best_idx = (start + k // len(lb), k % len(lb))
    labels = np.concatenate([la[best_idx[0]], lb[best_idx[1]]]).reshape(h, w)
    return labels, energy(labels, unary, features, boxes, heatmap, params, op=op)


# ----------------------------------------------------------------------------
# tuning


@dataclass
class ValSample:
    scores: np.ndarray
    image: np.ndarray
    boxes: list
    heatmap: np.ndarray
    gt: np.ndarray
    instances: object = None


def expand_grid(spec, base: CrfParams = CrfParams()) -> list[CrfParams]:
    """A list of parameter dicts, or ``{"base": {...}, "grid": {name: [values]}}``."""
    if isinstance(spec, list):
        return [replace(base, **p) for p in spec]
    base = replace(base, **spec.get("base", {}))
    grid = spec.get("grid", {})
    names = list(grid)
    return [replace(base, **dict(zip(names, combo)))
            for combo in itertools.product(*(grid[k] for k in names))]


def grid_search(params_grid, val_set, table):
    """Pick the grid point with the best mean class IoU on ``val_set``.

    Returns ``(best_params, rows)`` with one row per grid point, in grid order.
    """
    from .metrics import ConfusionAccumulator, accumulate, iou, mean_score

    if len(params_grid) == 0:
        raise ValueError("empty parameter grid")
    if len(val_set) == 0:
        raise ValueError("empty validation set")
    rows = []
    best, best_score = None, -math.inf
    for params in params_grid:
        acc = ConfusionAccumulator(table)
        for s in val_set:
            pred = refine(s.scores, s.image, s.boxes, s.heatmap, params)
            accumulate(pred, s.gt, s.instances, table, None, acc)
        score = mean_score(iou(acc, "class"))
        rows.append({**params.__dict__, "mean_iou_class": score})
        log.info("grid point %s -> mIoU %.4f", params, score)
        if score > best_score:
            best, best_score = params, score
    return best, rows
