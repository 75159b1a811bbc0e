"""Two-branch parsing: coarse pass on the full image, fine pass on the fovea.

The fovea crop is upscaled before classification so that distant objects are
seen at a scale closer to nearby ones; its scores are brought back to crop
resolution and pasted into (or averaged with) the coarse scores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .perspective import FoveaRect, locate_fovea
from .resample import resize_bilinear, resize_nearest

log = logging.getLogger(__name__)

FUSION_MODES = ("replace", "average")
RESAMPLE_MODES = ("nearest", "bilinear")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "replace"
    upscale_factor: int = 2
    resample: str = "nearest"  # score maps; images are always bilinear in run_pipeline
    win_frac_w: float = 0.5
    win_frac_h: float = 0.5
    stride: int = 4

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode {self.mode!r} not in {FUSION_MODES}")
        if self.resample not in RESAMPLE_MODES:
            raise ValueError(f"resample {self.resample!r} not in {RESAMPLE_MODES}")
        if self.upscale_factor < 1:
            raise ValueError("upscale_factor must be >= 1")


@dataclass(frozen=True)
class BranchView:
    """Tells a classifier which branch it is serving.

    ``rect`` is None for the coarse branch; for the fovea branch it is the crop
    (in full-image pixels) and ``scale`` the upscale factor applied to it.
    """

    rect: FoveaRect | None = None
    scale: int = 1


class PixelClassifier(Protocol):
    def __call__(self, image: np.ndarray, view: BranchView) -> np.ndarray:
        """Return an (H, W, L) score map matching ``image``'s spatial size."""


def _check_rect(rect: FoveaRect, height, width):
    if not rect.fits(width, height):
        raise ValueError(f"fovea rect {rect.to_json()} outside {width}x{height} image")


def crop_and_upscale(image: np.ndarray, rect: FoveaRect, factor: int = 2, resample: str = "bilinear"):
    _check_rect(rect, *image.shape[:2])
    crop = image[rect.slices]
    if factor == 1:
        return crop.copy()
    out_h, out_w = rect.height * factor, rect.width * factor
    if resample == "nearest":
        return np.repeat(np.repeat(crop, factor, axis=0), factor, axis=1)
    if resample != "bilinear":
        raise ValueError(f"unknown resample mode {resample!r}")
    up = resize_bilinear(crop, out_h, out_w)
    if image.dtype == np.uint8:
        return np.clip(np.rint(up), 0, 255).astype(np.uint8)
    return up.astype(image.dtype, copy=False)


def downscale_scores(scores: np.ndarray, factor: int = 2, resample: str = "nearest") -> np.ndarray:
    if factor == 1:
        return scores.copy()
    h, w = scores.shape[:2]
    if resample == "nearest":
        if h % factor or w % factor:
            raise ValueError(f"score map {w}x{h} not divisible by factor {factor}")
        return scores[::factor, ::factor].copy()
    if resample != "bilinear":
        raise ValueError(f"unknown resample mode {resample!r}")
    out = resize_bilinear(scores, max(1, round(h / factor)), max(1, round(w / factor)))
    return out.astype(scores.dtype, copy=False)


def fuse(coarse: np.ndarray, fovea_scores: np.ndarray, rect: FoveaRect, cfg: FusionConfig = FusionConfig()):
    h, w, n_labels = coarse.shape
    _check_rect(rect, h, w)
    f = cfg.upscale_factor
    expected = (rect.height * f, rect.width * f, n_labels)
    if fovea_scores.shape != expected:
        raise ValueError(f"fovea scores shape {fovea_scores.shape}, expected {expected}")
    fine = downscale_scores(fovea_scores, f, cfg.resample)
    if fine.shape[:2] != (rect.height, rect.width):
        fine = resize_nearest(fine, rect.height, rect.width)
    out = coarse.copy()
    ys, xs = rect.slices
    if cfg.mode == "replace":
        out[ys, xs] = fine
    else:
        out[ys, xs] = (coarse[ys, xs] + fine) / 2
    return out


def run_pipeline(image: np.ndarray, classifier: PixelClassifier, heatmap: np.ndarray,
                 cfg: FusionConfig = FusionConfig()):
    """Locate the fovea, classify both branches, fuse. Returns (scores, rect)."""
    if heatmap.shape != image.shape[:2]:
        raise ValueError(f"heatmap shape {heatmap.shape} != image shape {image.shape[:2]}")
    rect = locate_fovea(heatmap, cfg.win_frac_w, cfg.win_frac_h, cfg.stride)
    log.debug("fovea rect %s", rect)
    coarse = np.asarray(classifier(image, BranchView()))
    if coarse.shape[:2] != image.shape[:2]:
        raise ValueError(f"coarse branch returned {coarse.shape}, expected spatial {image.shape[:2]}")
    crop = crop_and_upscale(image, rect, cfg.upscale_factor, "bilinear")
    fine = np.asarray(classifier(crop, BranchView(rect, cfg.upscale_factor)))
    if fine.ndim != 3 or fine.shape[2] != coarse.shape[2]:
        raise ValueError(f"fovea branch returned {fine.shape}, labels must match coarse {coarse.shape[2]}")
    if not (np.isfinite(coarse).all() and np.isfinite(fine).all()):
        raise ValueError("classifier produced non-finite scores")
    return fuse(coarse, fine, rect, cfg), rect


class FileClassifier:
    """Serves precomputed score maps.

    Without fovea scores the fovea branch replays the coarse scores of the crop
    upsampled by pixel replication, which makes fusion a no-op.
    """

    def __init__(self, coarse: np.ndarray, fovea: np.ndarray | None = None):
        self.coarse = coarse
        self.fovea = fovea

    def __call__(self, image, view: BranchView):
        if view.rect is None:
            return self.coarse
        if self.fovea is not None:
            return self.fovea
        crop = self.coarse[view.rect.slices]
        return np.repeat(np.repeat(crop, view.scale, axis=0), view.scale, axis=1)
