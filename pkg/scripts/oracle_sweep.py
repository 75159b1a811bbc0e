"""Sweep synthetic-oracle settings and count fovea wins per block of scenes.

Used to pick the oracle defaults: a setting is robust when the fovea branch
wins in most scenes of every block.

    python3 scripts/oracle_sweep.py --blocks 6 --rho-max 0.6 0.8 --area-ref 24 32
"""
import argparse
import itertools

import numpy as np

from fovea.foveaparse import BranchView, FusionConfig, run_pipeline
from fovea.metrics import accumulate, summarize
from fovea.perspective import compute_average_sizes, global_prior, heatmap_h, heatmap_v
from fovea.synth import OracleClassifier, OracleConfig, SceneSpec, generate_scene


def run_block(block, per_block, ocfg):
    spec = SceneSpec()
    seeds = range(block * per_block, (block + 1) * per_block)
    scenes = [generate_scene(SceneSpec(rng_seed=s)) for s in seeds]
    table = compute_average_sizes([s.instances for s in scenes], spec.class_table())
    maps = [heatmap_h(s.instances, table) for s in scenes]
    prior = global_prior(maps, spec.width, spec.height)
    wins, diffs = 0, []
    for seed, s, h in zip(seeds, scenes, maps):
        clf = OracleClassifier(s, OracleConfig(**{**ocfg, "rng_seed": seed}), spec.num_labels, spec.confusable())
        fused, _ = run_pipeline(s.image, clf, heatmap_v(h, prior, 1.0), FusionConfig())
        c = summarize(accumulate(clf(s.image, BranchView()).argmax(-1), s.gt, s.instances, table))["iiou_class"]
        f = summarize(accumulate(fused.argmax(-1), s.gt, s.instances, table))["iiou_class"]
        wins += f > c
        diffs.append(f - c)
    return wins, float(np.mean(diffs))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--blocks", type=int, default=6)
    ap.add_argument("--per-block", type=int, default=10)
    ap.add_argument("--rho-max", type=float, nargs="+", default=[0.6, 0.8])
    ap.add_argument("--area-ref", type=float, nargs="+", default=[24.0, 32.0])
    ap.add_argument("--breakdown-area", type=float, nargs="+", default=[800.0])
    args = ap.parse_args()
    for rho, ref, bd in itertools.product(args.rho_max, args.area_ref, args.breakdown_area):
        ocfg = dict(rho_max=rho, area_ref=ref, breakdown_area=bd)
        res = [run_block(b, args.per_block, ocfg) for b in range(args.blocks)]
        print(f"rho_max={rho} area_ref={ref} breakdown_area={bd}: "
              f"wins {[w for w, _ in res]} (min {min(w for w, _ in res)}/{args.per_block}), "
              f"mean gain {np.mean([d for _, d in res]):+.4f}")


if __name__ == "__main__":
    main()
