"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (missing or invalid input
files, bad config), 3 internal error. Set FOVEA_LOG=DEBUG|INFO|WARNING to
control logging, or pass -v.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, stages
from .config import ConfigError, RunConfig, build_block, load_config, override
from .crf import CrfParams, ValSample, expand_grid, grid_search, refine
from .foveaparse import FileClassifier, run_pipeline
from .perspective import FoveaRect, global_prior, locate_fovea
from .synth import OracleClassifier, Scene, SceneSpec

log = logging.getLogger("fovea")

SUBCOMMANDS = ("synth", "heatmap-gt", "global-prior", "fovea", "parse", "crf", "tune-crf", "eval", "pipeline")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="run config JSON (flags override it)")
    p.add_argument("--seed", type=int, help="global seed; all randomness derives from it")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-scene work")
    p.add_argument("--out-dir", type=Path, help="all outputs go under this directory")
    p.add_argument("--emit-plots", action="store_true", help="write CSV series (energy traces, metric per stage)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _fusion_flags(p):
    p.add_argument("--fusion-mode", choices=["replace", "average"])
    p.add_argument("--upscale-factor", type=int)
    p.add_argument("--win-frac", type=float, nargs=2, metavar=("W", "H"), help="fovea size as image fractions")
    p.add_argument("--stride", type=int, help="fovea search stride")


def _crf_flags(p):
    for name, typ in [("w1", float), ("w2", float), ("theta-alpha", float), ("theta-beta", float),
                      ("theta-gamma", float), ("iterations", int), ("mu-fallback", float)]:
        p.add_argument(f"--{name}", type=typ)


def _metric_flags(p):
    p.add_argument("--region", choices=["full", "central", "peripheral"])
    p.add_argument("--central-frac", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fovea", description="Perspective-aware scene parsing toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic perspective dataset")
    _common(p)
    p.add_argument("--spec", type=Path, help="scene spec JSON (overrides the config's scene block)")
    p.add_argument("--num-scenes", type=int)

    p = sub.add_parser("heatmap-gt", help="ground-truth heatmaps, global prior and class sizes")
    _common(p)
    p.add_argument("--dataset", type=Path, required=True, help="dataset manifest.json")
    p.add_argument("--delta", type=float)
    p.add_argument("--background-value", type=float)
    p.add_argument("--prior-size", type=int, nargs=2, metavar=("W", "H"))

    p = sub.add_parser("global-prior", help="average heatmaps into a prior")
    _common(p)
    p.add_argument("heatmaps", type=Path, nargs="+")
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("fovea", help="locate the fovea region of a heatmap")
    _common(p)
    p.add_argument("--heatmap", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="FoveaRect JSON")
    _fusion_flags(p)

    p = sub.add_parser("parse", help="two-branch parse with fovea fusion")
    _common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--heatmap", type=Path, required=True)
    p.add_argument("--classifier", choices=["file", "synthetic-oracle"], default="file")
    p.add_argument("--coarse-scores", type=Path, help="file classifier: full-image FVT1 scores")
    p.add_argument("--fovea-scores", type=Path, help="file classifier: upscaled-crop FVT1 scores")
    p.add_argument("--gt", type=Path, help="synthetic oracle: ground-truth PGM")
    p.add_argument("--annotation", type=Path, help="synthetic oracle: annotation JSON")
    p.add_argument("--classes", type=Path, help="synthetic oracle: class table JSON")
    _fusion_flags(p)

    p = sub.add_parser("crf", help="perspective-aware CRF refinement")
    _common(p)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--boxes", type=Path, required=True)
    p.add_argument("--heatmap", type=Path, required=True)
    p.add_argument("--params", type=Path, help="CrfParams JSON")
    p.add_argument("--trace", type=Path, help="write per-iteration energy CSV here")
    _crf_flags(p)

    p = sub.add_parser("tune-crf", help="grid search CRF parameters on a validation set")
    _common(p)
    p.add_argument("--grid", type=Path, required=True, help="list of param dicts or {base, grid}")
    p.add_argument("--val", type=Path, required=True,
                   help="JSON list of {scores, image, boxes, heatmap, gt[, annotation]}")
    p.add_argument("--classes", type=Path, required=True)

    p = sub.add_parser("eval", help="IoU / iIoU of predictions against ground truth")
    _common(p)
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--gt-dir", type=Path, required=True)
    p.add_argument("--classes", type=Path, required=True, help="class table with average sizes")
    _metric_flags(p)

    p = sub.add_parser("pipeline", help="synth -> heatmap-gt -> fovea -> parse -> crf -> eval")
    _common(p)
    p.add_argument("--num-scenes", type=int)
    p.add_argument("--delta", type=float)
    _fusion_flags(p)
    _crf_flags(p)
    _metric_flags(p)
    return ap


# ----------------------------------------------------------------------------


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{p}: no such file or directory")


def _out_dir(args) -> Path:
    if args.out_dir is None:
        raise UsageError(f"fovea {args.command}: --out-dir is required")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.out_dir


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        _require(args.config)
        cfg = load_config(args.config)
    cfg = override(cfg, "", seed=args.seed, num_scenes=getattr(args, "num_scenes", None))
    if getattr(args, "prior_size", None):
        cfg = replace(cfg, prior_size=tuple(args.prior_size))
    cfg = override(cfg, "heatmap", delta=getattr(args, "delta", None),
                   background_value=getattr(args, "background_value", None))
    if hasattr(args, "fusion_mode"):
        wf = args.win_frac or (None, None)
        cfg = override(cfg, "fusion", mode=args.fusion_mode, upscale_factor=args.upscale_factor,
                       win_frac_w=wf[0], win_frac_h=wf[1], stride=args.stride)
    if hasattr(args, "w1"):
        cfg = override(cfg, "crf", **_crf_flags_of(args))
    if hasattr(args, "region"):
        cfg = override(cfg, "metrics", region=args.region, central_frac=args.central_frac)
    return cfg


def cmd_synth(args, cfg):
    if args.spec is not None:
        _require(args.spec)
        try:
            cfg = replace(cfg, scene=SceneSpec.from_json(json.loads(args.spec.read_text())))
        except (ValueError, TypeError, KeyError) as e:
            raise ConfigError(f"{args.spec}: {e}") from e
    manifest = stages.synth_stage(cfg, _out_dir(args))
    print(manifest)


def cmd_heatmap_gt(args, cfg):
    _require(args.dataset)
    print(stages.heatmap_gt_stage(args.dataset, cfg, _out_dir(args)))


def cmd_global_prior(args, cfg):
    _require(*args.heatmaps)
    maps = [dataio.read_tensor(p) for p in args.heatmaps]
    for p, m in zip(args.heatmaps, maps):
        if m.ndim != 2:
            raise DataError(f"{p}: expected a rank-2 heatmap, got shape {m.shape}")
    w, h = args.size
    dataio.write_tensor(global_prior(maps, w, h), args.out)


def cmd_fovea(args, cfg):
    _require(args.heatmap)
    heat = dataio.read_tensor(args.heatmap)
    if heat.ndim != 2:
        raise DataError(f"{args.heatmap}: expected a rank-2 heatmap, got shape {heat.shape}")
    f = cfg.fusion
    rect = locate_fovea(heat, f.win_frac_w, f.win_frac_h, f.stride)
    stages.write_json(rect.to_json(), args.out)


def cmd_parse(args, cfg):
    _require(args.image, args.heatmap, args.coarse_scores, args.fovea_scores, args.gt, args.annotation,
             args.classes)
    image = dataio.read_image(args.image)
    heat = dataio.read_tensor(args.heatmap)
    if args.classifier == "file":
        if args.coarse_scores is None:
            raise UsageError("parse --classifier file needs --coarse-scores")
        coarse = dataio.read_tensor(args.coarse_scores)
        fovea = dataio.read_tensor(args.fovea_scores) if args.fovea_scores else None
        for p, t in [(args.coarse_scores, coarse), (args.fovea_scores, fovea)]:
            if t is not None and t.ndim != 3:
                raise DataError(f"{p}: expected a rank-3 score map, got shape {t.shape}")
        clf = FileClassifier(coarse, fovea)
    else:
        if None in (args.gt, args.annotation, args.classes):
            raise UsageError("parse --classifier synthetic-oracle needs --gt, --annotation and --classes")
        table = dataio.read_class_table(args.classes)
        gt = dataio.read_label_map(args.gt)
        instances = dataio.ingest_polygon_annotations(args.annotation, table, gt.shape[1], gt.shape[0])
        scene = Scene(image, instances, gt, [])
        oracle = replace(cfg.oracle, rng_seed=cfg.seed)
        clf = OracleClassifier(scene, oracle, cfg.scene.num_labels, cfg.scene.confusable())
    try:
        fused, rect = run_pipeline(image, clf, heat, cfg.fusion)
    except ValueError as e:
        raise DataError(f"parse {args.image}: {e}") from e
    out = _out_dir(args)
    dataio.write_tensor(fused, out / "fused.fvt")
    dataio.write_label_map(fused.argmax(axis=2), out / "labels.pgm")
    stages.write_json(rect.to_json(), out / "fovea.json")


def _crf_flags_of(args) -> dict:
    return dict(w1=args.w1, w2=args.w2, theta_alpha=args.theta_alpha, theta_beta=args.theta_beta,
                theta_gamma=args.theta_gamma, iterations=args.iterations, mu_fallback=args.mu_fallback)


def _crf_params(args, cfg) -> CrfParams:
    """Config block, then the --params file, then explicit flags."""
    params = cfg.crf
    if args.params is not None:
        _require(args.params)
        try:
            doc = json.loads(args.params.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.params}: malformed JSON ({e})") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.params}: expected a JSON object")
        params = build_block(CrfParams, {**params.__dict__, **doc}, str(args.params))
    return override(RunConfig(crf=params), "crf", **_crf_flags_of(args)).crf


def cmd_crf(args, cfg):
    _require(args.scores, args.image, args.boxes, args.heatmap)
    params = _crf_params(args, cfg)
    scores = dataio.read_tensor(args.scores)
    image = dataio.read_image(args.image)
    heat = dataio.read_tensor(args.heatmap)
    if scores.ndim != 3 or heat.ndim != 2:
        raise DataError(f"{args.scores}/{args.heatmap}: expected rank-3 scores and rank-2 heatmap")
    h, w = image.shape[:2]
    if scores.shape[:2] != (h, w) or heat.shape != (h, w):
        raise DataError(f"{args.scores}: sizes differ (scores {scores.shape[:2]}, heatmap {heat.shape}, "
                        f"image {(h, w)})")
    boxes = dataio.read_boxes(args.boxes, w, h)
    out = _out_dir(args)
    if args.trace or args.emit_plots:
        labels, rows = stages.refine_with_trace(scores, image, boxes, heat, params)
        stages.write_trace(rows, args.trace or out / "energy_trace.csv")
    else:
        labels = refine(scores, image, boxes, heat, params)
    dataio.write_label_map(labels, out / "labels.pgm")


def cmd_tune_crf(args, cfg):
    _require(args.grid, args.val, args.classes)
    table = dataio.read_class_table(args.classes)
    try:
        grid = expand_grid(json.loads(args.grid.read_text()), cfg.crf)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.grid}: malformed JSON ({e})") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{args.grid}: {e}") from e
    root = args.val.parent
    val = []
    for n, entry in enumerate(json.loads(args.val.read_text())):
        try:
            paths = {k: root / entry[k] for k in ("scores", "image", "boxes", "heatmap", "gt")}
        except KeyError as e:
            raise DataError(f"{args.val}: entry {n} missing field {e}") from e
        _require(*paths.values())
        gt = dataio.read_label_map(paths["gt"])
        h, w = gt.shape
        instances = None
        if entry.get("annotation"):
            _require(root / entry["annotation"])
            instances = dataio.ingest_polygon_annotations(root / entry["annotation"], table, w, h)
        val.append(ValSample(dataio.read_tensor(paths["scores"]), dataio.read_image(paths["image"]),
                             dataio.read_boxes(paths["boxes"], w, h), dataio.read_tensor(paths["heatmap"]),
                             gt, instances))
    best, rows = grid_search(grid, val, table)
    out = _out_dir(args)
    with open(out / "scores.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    stages.write_json(best.__dict__, out / "best_params.json")


def cmd_eval(args, cfg):
    _require(args.pred_dir, args.gt_dir, args.classes)
    table = dataio.read_class_table(args.classes)
    acc = stages.evaluate_dir(args.pred_dir, args.gt_dir, table, cfg)
    out = _out_dir(args)
    stages.write_metrics_csv(acc, out / "metrics.csv")
    stages.write_json(stages.metrics_summary(acc), out / "summary.json")


def cmd_pipeline(args, cfg):
    out = _out_dir(args)
    timings = {}

    def timed(name, fn, *a, **kw):
        t0 = time.perf_counter()
        result = fn(*a, **kw)
        timings[name] = time.perf_counter() - t0
        log.info("stage %s done in %.2fs", name, timings[name])
        return result

    manifest = timed("synth", stages.synth_stage, cfg, out / "dataset")
    heat_dir = timed("heatmap-gt", stages.heatmap_gt_stage, manifest, cfg, out / "heatmaps")
    rects = timed("fovea", stages.fovea_stage, manifest, heat_dir, cfg, out / "fovea")
    timed("parse", stages.parse_stage, manifest, heat_dir, cfg, out / "parse", threads=args.threads)
    trace_dir = out / "plots" if args.emit_plots else None
    timed("crf", stages.crf_stage, manifest, out / "parse", heat_dir, cfg, out / "crf",
          threads=args.threads, trace_dir=trace_dir)

    table = dataio.read_class_table(heat_dir / "classes.json")
    variants = {"coarse": out / "parse" / "coarse", "fused": out / "parse", "crf": out / "crf"}
    metrics = {}
    t0 = time.perf_counter()
    (out / "eval").mkdir(exist_ok=True)
    for name, pred_dir in variants.items():
        acc = stages.evaluate_dir(pred_dir, out / "dataset", table, cfg)
        stages.write_metrics_csv(acc, out / "eval" / f"metrics_{name}.csv")
        metrics[name] = stages.metrics_summary(acc)
    timings["eval"] = time.perf_counter() - t0

    summary = {
        "seed": cfg.seed,
        "num_scenes": cfg.num_scenes,
        "stages": ["synth", "heatmap-gt", "fovea", "parse", "crf", "eval"],
        "config": cfg.to_json(),
        "fovea": {stem: r.to_json() for stem, r in rects.items()},
        "metrics": metrics,
    }
    stages.write_json(summary, out / "summary.json")
    # wall-clock times vary run to run, so they stay out of summary.json
    stages.write_json({"seconds": timings}, out / "timings.json")
    if args.emit_plots:
        with open(out / "plots" / "metric_vs_stage.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["stage", "iou_class", "iiou_class", "iou_category", "iiou_category"])
            for name, m in metrics.items():
                w.writerow([name] + [f"{m['means'][k]:.6f}" for k in
                                     ("iou_class", "iiou_class", "iou_category", "iiou_category")])
    means = {k: round(v["means"]["iiou_class"], 4) for k, v in metrics.items()}
    print(f"iIoU_class per stage: {means}")


COMMANDS = {
    "synth": cmd_synth, "heatmap-gt": cmd_heatmap_gt, "global-prior": cmd_global_prior,
    "fovea": cmd_fovea, "parse": cmd_parse, "crf": cmd_crf, "tune-crf": cmd_tune_crf,
    "eval": cmd_eval, "pipeline": cmd_pipeline,
}


def _setup_logging(verbose: int):
    level = os.environ.get("FOVEA_LOG", "WARNING").upper()
    if verbose:
        level = "INFO" if verbose == 1 else "DEBUG"
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    _setup_logging(args.verbose)
    if args.threads < 1:
        print("fovea: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"fovea {args.command}: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError, dataio.FormatError, ConfigError,
            DataError) as e:
        print(f"fovea {args.command}: error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"fovea {args.command}: invalid data: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"fovea {args.command}: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
