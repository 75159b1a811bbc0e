import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from fovea.dataio import ClassInfo, ClassTable, rasterize_instances, write_polygon_annotations
from fovea.perspective import (
    FoveaRect, HeatmapGtConfig, compute_average_sizes, global_prior, heatmap_h, heatmap_v, locate_fovea,
    smoothed_l1,
)
from fovea.synth import SceneSpec, generate_scene


def square(x, y, s):
    return [[x, y], [x + s, y], [x + s, y + s], [x, y + s]]


# ---------------------------------------------------------------- average sizes and H

def test_average_sizes(table):
    a = rasterize_instances(40, 40, [(3, square(0, 0, 10)), (1, square(20, 20, 6))])
    b = rasterize_instances(40, 40, [(3, square(0, 0, 10 * math.sqrt(3)))])
    sizes = compute_average_sizes([a, b], table)
    assert sizes.get(3).avg_size == pytest.approx((100 + b.instances[0].area) / 2)
    assert sizes.get(1).avg_size == 36
    assert sizes.get(2).avg_size is None
    assert sizes.get(0).avg_size is None


def test_average_sizes_exact_values(table):
    a = rasterize_instances(30, 30, [(3, [[0, 0], [10, 0], [10, 10], [0, 10]]),
                                     (3, [[0, 12], [10, 12], [10, 42], [0, 42]])])
    assert [i.area for i in a.instances] == [100, 180]
    b = rasterize_instances(30, 30, [(2, [[0, 0], [6, 0], [6, 7], [0, 7]])])
    sizes = compute_average_sizes([a, b], table)
    assert sizes.get(3).avg_size == 140.0
    assert sizes.get(2).avg_size == 42.0
    with pytest.raises(ValueError):
        compute_average_sizes([], table)


def test_heatmap_h_ratio(table):
    t = table.with_avg_sizes({1: 200.0})
    inst = rasterize_instances(20, 20, [(1, [[0, 0], [10, 0], [10, 5], [0, 5]])])
    h = heatmap_h(inst, t, HeatmapGtConfig(background_value=0.25))
    assert (h[:5, :10] == 4.0).all()
    assert (h[5:] == 0.25).all() and (h[:, 10:] == 0.25).all()


def test_heatmap_h_missing_average_raises(table):
    inst = rasterize_instances(8, 8, [(0, square(0, 0, 3))])  # road has no average
    with pytest.raises(ValueError, match="average"):
        heatmap_h(inst, table)


def test_heatmap_h_is_one_for_average_sized_instances(table):
    inst = rasterize_instances(30, 30, [(1, square(0, 0, 4)), (1, square(10, 10, 4)), (3, [[20, 20], [24, 20], [24, 22], [20, 22]])])
    t = compute_average_sizes([inst], table)
    h = heatmap_h(inst, t)
    covered = inst.instance_map >= 0
    assert (h[covered] == 1.0).all() and (h[~covered] == 0.0).all()


def test_heatmap_h_matches_annotation_recomputation(tmp_path):
    spec = SceneSpec(width=48, height=48, vanishing_point=(24, 20), num_objects=10, spread=30.0, rng_seed=5)
    scene = generate_scene(spec)
    table = spec.class_table()
    t = compute_average_sizes([scene.instances], table)
    write_polygon_annotations(scene.instances, table, tmp_path / "a.json")
    avg = {c.name: c.avg_size for c in t if c.avg_size is not None}
    expected = np.array(oracles.heatmap_from_annotation(tmp_path / "a.json", avg))
    np.testing.assert_array_equal(heatmap_h(scene.instances, t), expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 6), min_size=1, max_size=4), st.floats(0.5, 50))
def test_heatmap_h_scale_covariant(k, sides, avg):
    # growing every side by k scales each area by c = k*k; the average is scaled by c too
    c = k * k
    inst = rasterize_instances(48, 10, [(1, square(8 * j, 0, s)) for j, s in enumerate(sides)])
    big = rasterize_instances(48 * k, 10 * k, [(1, square(8 * j * k, 0, s * k)) for j, s in enumerate(sides)])
    assert [i.area * c for i in inst.instances] == [i.area for i in big.instances]
    t = ClassTable((ClassInfo(1, "car", "vehicle", avg_size=avg),))
    t_big = ClassTable((ClassInfo(1, "car", "vehicle", avg_size=avg * c),))
    h, h_big = heatmap_h(inst, t), heatmap_h(big, t_big)
    # compare the value carried by each instance
    for j in range(len(sides)):
        assert h[inst.instance_map == j].tolist() == [] or \
            h[inst.instance_map == j][0] == pytest.approx(h_big[big.instance_map == j][0], rel=1e-15)


# ---------------------------------------------------------------- prior and V

def test_global_prior_examples(rng):
    h = rng.uniform(0, 3, (8, 8))
    np.testing.assert_allclose(global_prior([h, h, h], 8, 8), h, rtol=1e-15)
    g = global_prior([np.ones((5, 7)), np.full((5, 7), 3.0)], 7, 5)
    assert (g == 2.0).all()


def test_global_prior_matches_summation(rng):
    maps = [rng.uniform(0, 5, (8, 8)) for _ in range(10)]
    g = global_prior(maps, 8, 8)
    expected = [[math.fsum(m[y, x] for m in maps) / 10 for x in range(8)] for y in range(8)]
    np.testing.assert_allclose(g, expected, atol=1e-6)


def test_global_prior_resamples_constant_maps():
    g = global_prior([np.full((4, 6), 2.0), np.full((10, 3), 4.0)], 5, 5)
    np.testing.assert_allclose(g, 3.0, rtol=1e-15)


def test_heatmap_v(rng):
    h, g = rng.uniform(0, 1, (6, 6)), rng.uniform(0, 1, (6, 6))
    assert np.array_equal(heatmap_v(h, g, 0.0), h)
    assert (heatmap_v(np.ones((3, 3)), np.full((3, 3), 2.0), 0.5) == 2.0).all()
    v = heatmap_v(h, g, 1.0)
    for y in range(6):
        for x in range(6):
            assert v[y, x] == h[y, x] + g[y, x]
    with pytest.raises(ValueError):
        heatmap_v(h, g[:5], 1.0)


# ---------------------------------------------------------------- smoothed l1

def test_smoothed_l1_values():
    z = np.zeros((4, 4))
    assert smoothed_l1(z, z) == 0.0
    assert smoothed_l1(z + 0.5, z) == 0.125
    assert smoothed_l1(z + 3.0, z) == 2.5
    assert smoothed_l1(z + 1.0, z) == 0.5
    # continuity at |x| = 1 from below
    assert smoothed_l1(z + np.nextafter(1.0, 0), z) == pytest.approx(0.5, abs=1e-15)


# grid-valued inputs: residuals small enough for 0.5 * x**2 to underflow would break "iff"
grid_maps = arrays(np.int64, (3, 3), elements=st.integers(-800, 800))


@given(grid_maps, grid_maps)
def test_smoothed_l1_nonnegative_zero_iff_equal(a, b):
    a, b = a / 8.0, b / 8.0
    loss = smoothed_l1(a, b)
    assert loss >= 0
    assert (loss == 0) == np.array_equal(a, b)


# ---------------------------------------------------------------- fovea search

def test_constant_heatmap_ties_to_origin():
    rect = locate_fovea(np.full((10, 12), 0.3))
    assert (rect.x0, rect.y0, rect.width, rect.height) == (0, 0, 6, 5)


def test_bright_pixel_is_covered():
    heat = np.zeros((17, 17))
    heat[8, 8] = 1.0
    rect = locate_fovea(heat, 0.5, 0.5, 1)
    assert rect.x0 <= 8 < rect.x1 and rect.y0 <= 8 < rect.y1


def test_window_size_rounds_half_up_and_final_position_included():
    heat = np.zeros((9, 9))
    heat[8, 8] = 1.0
    rect = locate_fovea(heat, 0.5, 0.5, stride=4)  # round(4.5) = 5; positions 0, 4
    assert (rect.width, rect.height) == (5, 5)
    assert (rect.x0, rect.y0) == (4, 4)
    heat = np.zeros((10, 10))
    heat[9, 9] = 1.0
    rect = locate_fovea(heat, 0.3, 0.3, stride=4)  # window 3; positions 0, 4 and the final 7
    assert (rect.x0, rect.y0) == (7, 7)


def test_window_errors():
    with pytest.raises(ValueError):
        locate_fovea(np.ones((4, 4)), 1.5, 0.5)
    with pytest.raises(ValueError):
        locate_fovea(np.ones((4, 4)), 0.5, 0.5, stride=0)


def test_stride_one_matches_brute_force_and_beats_stride_four(rng):
    for _ in range(20):
        heat = rng.uniform(0, 1, (32, 32))
        r1 = locate_fovea(heat, stride=1)
        r4 = locate_fovea(heat, stride=4)
        (bx, by), bmean = oracles.best_window(heat.tolist(), 16, 16)
        assert (r1.x0, r1.y0) == (bx, by)
        assert r1.mean_score >= r4.mean_score
        assert r1.mean_score == pytest.approx(bmean, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)), elements=st.floats(0, 10)),
       st.floats(1e-3, 1e3), st.integers(1, 3))
def test_locate_fovea_scale_invariant(heat, c, stride):
    a = locate_fovea(heat, 0.5, 0.5, stride)
    b = locate_fovea(heat * c, 0.5, 0.5, stride)
    assert (a.x0, a.y0, a.width, a.height) == (b.x0, b.y0, b.width, b.height)


def test_fovea_rect_json_round_trip():
    r = FoveaRect(3, 4, 10, 12, 0.75)
    assert FoveaRect.from_json(r.to_json()) == r
    assert set(r.to_json()) == {"x0", "y0", "width", "height", "mean_score"}
