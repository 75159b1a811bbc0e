"""File-level stages chained by the ``pipeline`` subcommand.

Every stage reads its inputs from disk and writes only under its output
directory. Dataset layout written by :func:`synth_stage`::

    manifest.json  classes.json
    <stem>.ppm  <stem>.gt.pgm  <stem>.ann.json  <stem>.boxes.json
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataio
from .config import RunConfig
from .crf import PairwiseOperator, energy, mean_field, pixel_features, refine, unary_from_scores
from .foveaparse import BranchView, run_pipeline
from .metrics import ConfusionAccumulator, accumulate, iiou, iou, make_region_mask, summarize
from .perspective import compute_average_sizes, global_prior, heatmap_h, heatmap_v, locate_fovea
from .resample import resize_bilinear
from .synth import OracleClassifier, Scene, generate_scene

log = logging.getLogger(__name__)


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1)[0])


def write_json(obj, path):
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {str(k): clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return clean(v.item())
        return v
    Path(path).write_text(json.dumps(clean(obj), indent=2, sort_keys=True) + "\n")


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))  # keeps input order


# ----------------------------------------------------------------------------
# dataset


@dataclass
class SceneFiles:
    stem: str
    image: Path
    gt: Path
    annotation: Path
    boxes: Path
    oracle_seed: int = 0


class Dataset:
    def __init__(self, manifest_path):
        self.path = Path(manifest_path)
        self.root = self.path.parent
        try:
            doc = json.loads(self.path.read_text())
            self.width, self.height = int(doc["width"]), int(doc["height"])
            self.num_labels = int(doc["num_labels"])
            self.confusable = {int(k): int(v) for k, v in doc.get("confusable", {}).items()}
            self.classes_path = self.root / doc["classes"]
            self.scenes = [
                SceneFiles(s["stem"], self.root / s["image"], self.root / s["gt"],
                           self.root / s["annotation"], self.root / s["boxes"], int(s.get("oracle_seed", 0)))
                for s in doc["scenes"]
            ]
        except json.JSONDecodeError as e:
            raise dataio.FormatError(f"{self.path}: malformed JSON ({e})") from e
        except (KeyError, TypeError, ValueError) as e:
            raise dataio.FormatError(f"{self.path}: invalid manifest field {e}") from e

    def check_files(self):
        for p in [self.classes_path] + [f for s in self.scenes for f in (s.image, s.gt, s.annotation, s.boxes)]:
            if not p.exists():
                raise FileNotFoundError(f"{p}: referenced by {self.path} but missing")

    def table(self):
        return dataio.read_class_table(self.classes_path)

    def load(self, s: SceneFiles, table=None) -> Scene:
        table = table or self.table()
        image = dataio.read_image(s.image)
        gt = dataio.read_label_map(s.gt)
        instances = dataio.ingest_polygon_annotations(s.annotation, table, gt.shape[1], gt.shape[0])
        boxes = dataio.read_boxes(s.boxes, gt.shape[1], gt.shape[0])
        return Scene(image, instances, gt, boxes)


def synth_stage(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.scene
    table = spec.class_table()
    dataio.write_class_table(table, out / "classes.json")
    entries = []
    for i in range(cfg.num_scenes):
        stem = f"scene_{i:03d}"
        scene = generate_scene(replace(spec, rng_seed=derive_seed(cfg.seed, i)))
        dataio.write_image(scene.image, out / f"{stem}.ppm")
        dataio.write_label_map(scene.gt, out / f"{stem}.gt.pgm")
        dataio.write_polygon_annotations(scene.instances, table, out / f"{stem}.ann.json")
        dataio.write_boxes(scene.boxes, out / f"{stem}.boxes.json")
        entries.append({"stem": stem, "image": f"{stem}.ppm", "gt": f"{stem}.gt.pgm",
                        "annotation": f"{stem}.ann.json", "boxes": f"{stem}.boxes.json",
                        "oracle_seed": derive_seed(cfg.seed, i, 1)})
        log.info("synth %s: %d instances", stem, len(scene.instances))
    manifest = {"width": spec.width, "height": spec.height, "num_labels": spec.num_labels,
                "classes": "classes.json", "confusable": spec.confusable(), "scenes": entries}
    write_json(manifest, out / "manifest.json")
    return out / "manifest.json"


def heatmap_gt_stage(manifest, cfg: RunConfig, out_dir) -> Path:
    """Writes classes.json with average sizes, prior.fvt and per-scene .h/.v heatmaps."""
    ds = Dataset(manifest)
    ds.check_files()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = ds.table()
    sets = [dataio.ingest_polygon_annotations(s.annotation, table) for s in ds.scenes]
    table = compute_average_sizes(sets, table)
    dataio.write_class_table(table, out / "classes.json")
    hs = [heatmap_h(inst, table, cfg.heatmap) for inst in sets]
    pw, ph = cfg.prior_size or (ds.width, ds.height)
    prior = global_prior(hs, pw, ph)
    dataio.write_tensor(prior, out / "prior.fvt")
    for s, h in zip(ds.scenes, hs):
        g = prior if prior.shape == h.shape else resize_bilinear(prior, *h.shape)
        dataio.write_tensor(h, out / f"{s.stem}.h.fvt")
        dataio.write_tensor(heatmap_v(h, g, cfg.heatmap.delta), out / f"{s.stem}.v.fvt")
    return out


def fovea_stage(manifest, heat_dir, cfg: RunConfig, out_dir):
    ds = Dataset(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    f = cfg.fusion
    rects = {}
    for s in ds.scenes:
        v = dataio.read_tensor(Path(heat_dir) / f"{s.stem}.v.fvt")
        rect = locate_fovea(v, f.win_frac_w, f.win_frac_h, f.stride)
        write_json(rect.to_json(), out / f"{s.stem}.json")
        rects[s.stem] = rect
    return rects


def parse_stage(manifest, heat_dir, cfg: RunConfig, out_dir, threads=1):
    """Fused scores/labels per scene, plus coarse-only labels under ``coarse/``."""
    ds = Dataset(manifest)
    table = ds.table()
    out = Path(out_dir)
    (out / "coarse").mkdir(parents=True, exist_ok=True)

    def one(s: SceneFiles):
        scene = ds.load(s, table)
        v = dataio.read_tensor(Path(heat_dir) / f"{s.stem}.v.fvt")
        clf = OracleClassifier(scene, replace(cfg.oracle, rng_seed=s.oracle_seed), ds.num_labels, ds.confusable)
        fused, rect = run_pipeline(scene.image, clf, v, cfg.fusion)
        coarse = clf(scene.image, BranchView())
        dataio.write_tensor(fused, out / f"{s.stem}.fvt")
        dataio.write_label_map(fused.argmax(axis=2), out / f"{s.stem}.pgm")
        dataio.write_label_map(coarse.argmax(axis=2), out / "coarse" / f"{s.stem}.pgm")
        write_json(rect.to_json(), out / f"{s.stem}.fovea.json")
        return rect

    return _map(one, ds.scenes, threads)


def crf_stage(manifest, parse_dir, heat_dir, cfg: RunConfig, out_dir, threads=1, trace_dir=None):
    ds = Dataset(manifest)
    table = ds.table()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(s: SceneFiles):
        scene = ds.load(s, table)
        scores = dataio.read_tensor(Path(parse_dir) / f"{s.stem}.fvt")
        v = dataio.read_tensor(Path(heat_dir) / f"{s.stem}.v.fvt")
        if trace_dir:
            labels, trace = refine_with_trace(scores, scene.image, scene.boxes, v, cfg.crf)
            write_trace(trace, Path(trace_dir) / f"energy_{s.stem}.csv")
        else:
            labels = refine(scores, scene.image, scene.boxes, v, cfg.crf)
        dataio.write_label_map(labels, out / f"{s.stem}.pgm")
        return labels

    if trace_dir:
        Path(trace_dir).mkdir(parents=True, exist_ok=True)
    return _map(one, ds.scenes, threads)


def refine_with_trace(scores, image, boxes, heatmap, params):
    """Like :func:`refine`, also returning the argmax labeling's energy per iteration."""
    unary = unary_from_scores(scores)
    feats = pixel_features(image)
    op = PairwiseOperator(feats, boxes, heatmap, params)
    rows = [(0, energy(unary.argmin(axis=2), unary, feats, boxes, heatmap, params, op=op))]

    def cb(it, q):
        rows.append((it + 1, energy(q.argmax(), unary, feats, boxes, heatmap, params, op=op)))

    q = mean_field(unary, feats, boxes, heatmap, params, callback=cb, op=op)
    return q.argmax(), rows


def write_trace(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "energy"])
        for it, e in rows:
            w.writerow([it, f"{e:.9g}"])


# ----------------------------------------------------------------------------
# evaluation


def evaluate_dir(pred_dir, gt_manifest_or_dir, table, cfg: RunConfig) -> ConfusionAccumulator:
    """Accumulate ``<pred_dir>/<stem>.pgm`` against ``<stem>.gt.pgm`` + ``<stem>.ann.json``."""
    gt_root = Path(gt_manifest_or_dir)
    if gt_root.is_file():
        gt_root = gt_root.parent
    stems = sorted(p.name[: -len(".gt.pgm")] for p in gt_root.glob("*.gt.pgm"))
    if not stems:
        raise FileNotFoundError(f"{gt_root}: no *.gt.pgm ground-truth files")
    acc = ConfusionAccumulator(table)
    for stem in stems:
        pred_path = Path(pred_dir) / f"{stem}.pgm"
        if not pred_path.exists():
            raise FileNotFoundError(f"{pred_path}: prediction missing for ground truth {stem}")
        gt = dataio.read_label_map(gt_root / f"{stem}.gt.pgm")
        pred = dataio.read_label_map(pred_path)
        ann = gt_root / f"{stem}.ann.json"
        instances = dataio.ingest_polygon_annotations(ann, table, gt.shape[1], gt.shape[0]) if ann.exists() else None
        mask = None
        if cfg.metrics.region != "full":
            mask = make_region_mask(gt.shape[1], gt.shape[0], cfg.metrics.region, cfg.metrics.central_frac)
        try:
            accumulate(pred, gt, instances, table, mask, acc)
        except ValueError as e:
            raise ValueError(f"{pred_path}: {e}") from e
    return acc


def metrics_rows(acc: ConfusionAccumulator):
    table = acc.table
    iou_c, iiou_c = iou(acc, "class"), iiou(acc, "class")
    return [(table.get(cid).name, iou_c.get(cid), iiou_c.get(cid)) for cid in acc.class_ids]


def write_metrics_csv(acc: ConfusionAccumulator, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "IoU", "iIoU"])
        for name, a, b in metrics_rows(acc):
            w.writerow([name, "" if a is None else f"{a:.6f}", "" if b is None else f"{b:.6f}"])


def metrics_summary(acc: ConfusionAccumulator) -> dict:
    table = acc.table
    return {
        "means": summarize(acc),
        "iou_class": {table.get(k).name: v for k, v in iou(acc, "class").items()},
        "iiou_class": {table.get(k).name: v for k, v in iiou(acc, "class").items()},
        "iou_category": iou(acc, "category"),
        "iiou_category": iiou(acc, "category"),
    }
