import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fovea.foveaparse import (
    BranchView, FileClassifier, FusionConfig, crop_and_upscale, downscale_scores, fuse, run_pipeline,
)
from fovea.perspective import FoveaRect, compute_average_sizes, heatmap_h, heatmap_v
from fovea.synth import OracleClassifier, OracleConfig, SceneSpec, generate_scene


@st.composite
def score_and_rect(draw, factor=2):
    h, w, n = draw(st.integers(2, 12)), draw(st.integers(2, 12)), draw(st.integers(2, 4))
    coarse = draw(arrays(np.float32, (h, w, n), elements=st.floats(-10, 10, width=32)))
    rh, rw = draw(st.integers(1, h)), draw(st.integers(1, w))
    y0, x0 = draw(st.integers(0, h - rh)), draw(st.integers(0, w - rw))
    fine = draw(arrays(np.float32, (rh * factor, rw * factor, n), elements=st.floats(-10, 10, width=32)))
    return coarse, fine, FoveaRect(x0, y0, rw, rh)


def test_crop_factor_one_is_exact_crop(rng):
    img = rng.integers(0, 256, (10, 12, 3), dtype=np.uint8)
    rect = FoveaRect(2, 3, 5, 4)
    np.testing.assert_array_equal(crop_and_upscale(img, rect, 1), img[3:7, 2:7])


def test_checkerboard_nearest():
    board = np.array([[0, 1], [1, 0]], dtype=np.float32)[..., None]
    up = crop_and_upscale(board, FoveaRect(0, 0, 2, 2), 2, "nearest")[..., 0]
    expected = np.kron(board[..., 0], np.ones((2, 2)))
    np.testing.assert_array_equal(up, expected)


def test_crop_bilinear_keeps_constant_image_and_dtype():
    img = np.full((8, 8, 3), 77, dtype=np.uint8)
    up = crop_and_upscale(img, FoveaRect(1, 1, 4, 4), 2, "bilinear")
    assert up.shape == (8, 8, 3) and up.dtype == np.uint8 and (up == 77).all()


def test_crop_rect_out_of_bounds():
    with pytest.raises(ValueError, match="outside"):
        crop_and_upscale(np.zeros((4, 4, 3)), FoveaRect(2, 2, 3, 3))


def test_downscale_examples(rng):
    s = rng.normal(size=(6, 8, 3))
    np.testing.assert_array_equal(downscale_scores(s, 1), s)
    assert (downscale_scores(np.full((8, 8, 2), 1.5), 2, "bilinear") == 1.5).all()
    with pytest.raises(ValueError, match="divisible"):
        downscale_scores(np.zeros((5, 4, 2)), 2, "nearest")


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 16), st.integers(1, 16), st.integers(2, 5)),
              elements=st.floats(-1e3, 1e3, width=32)), st.integers(1, 4))
def test_nearest_round_trip_identity(scores, factor):
    h, w = scores.shape[:2]
    up = crop_and_upscale(scores, FoveaRect(0, 0, w, h), factor, "nearest")
    np.testing.assert_array_equal(downscale_scores(up, factor, "nearest"), scores)


@settings(max_examples=50, deadline=None)
@given(score_and_rect(), st.sampled_from(["replace", "average"]))
def test_fuse_is_local(case, mode):
    coarse, fine, rect = case
    out = fuse(coarse, fine, rect, FusionConfig(mode=mode))
    outside = np.ones(coarse.shape[:2], bool)
    outside[rect.slices] = False
    assert out[outside].tobytes() == coarse[outside].tobytes()


@settings(max_examples=30, deadline=None)
@given(score_and_rect())
def test_replace_inside_depends_only_on_fovea(case):
    coarse, fine, rect = case
    a = fuse(coarse, fine, rect)
    b = fuse(coarse + 5, fine, rect)
    np.testing.assert_array_equal(a[rect.slices].argmax(-1), b[rect.slices].argmax(-1))


def test_self_fusion_is_identity(rng):
    coarse = rng.normal(size=(9, 11, 4))
    rect = FoveaRect(3, 2, 5, 6)
    fine = np.repeat(np.repeat(coarse[rect.slices], 2, 0), 2, 1)
    assert fuse(coarse, fine, rect).tobytes() == coarse.tobytes()


def test_average_mode(rng):
    coarse = rng.integers(-50, 50, (8, 8, 3)).astype(np.float64)
    rect = FoveaRect(2, 2, 4, 4)
    fine = np.repeat(np.repeat(coarse[rect.slices] + 2, 2, 0), 2, 1)
    out = fuse(coarse, fine, rect, FusionConfig(mode="average"))
    np.testing.assert_array_equal(out[rect.slices], coarse[rect.slices] + 1)


def test_fuse_size_mismatch():
    with pytest.raises(ValueError, match="expected"):
        fuse(np.zeros((8, 8, 2)), np.zeros((4, 4, 2)), FoveaRect(0, 0, 4, 4))


def test_constant_classifier_pipeline():
    calls = []

    def const(image, view):
        calls.append(view)
        out = np.zeros(image.shape[:2] + (3,))
        out[..., 1] = 1.0
        return out

    img = np.zeros((10, 10, 3), np.uint8)
    fused, rect = run_pipeline(img, const, np.ones((10, 10)), FusionConfig(stride=1))
    assert (rect.x0, rect.y0) == (0, 0)
    assert (fused[..., 1] == 1).all() and (fused[..., [0, 2]] == 0).all()
    assert len(calls) == 2 and calls[0].rect is None and calls[1].rect == rect


def test_second_call_failure_propagates():
    n = []

    def flaky(image, view):
        n.append(1)
        if len(n) == 2:
            raise RuntimeError("fovea branch down")
        return np.zeros(image.shape[:2] + (2,))

    with pytest.raises(RuntimeError, match="fovea branch down"):
        run_pipeline(np.zeros((8, 8, 3), np.uint8), flaky, np.ones((8, 8)))


def test_pipeline_deterministic_and_file_classifier_noop(rng):
    coarse = rng.normal(size=(12, 12, 3)).astype(np.float32)
    img = rng.integers(0, 256, (12, 12, 3), dtype=np.uint8)
    heat = rng.uniform(0, 1, (12, 12))
    a, ra = run_pipeline(img, FileClassifier(coarse), heat)
    b, rb = run_pipeline(img, FileClassifier(coarse), heat)
    assert ra == rb and a.tobytes() == b.tobytes()
    assert a.tobytes() == coarse.tobytes()  # replayed crop makes fusion the identity


def _instance_accuracy(pred, scene, region):
    """Mean over instances touching ``region`` of their per-pixel accuracy there."""
    imap = scene.instances.instance_map
    accs = []
    for j in np.unique(imap[region & (imap >= 0)]):
        sel = region & (imap == j)
        accs.append((pred[sel] == scene.gt[sel]).mean())
    return float(np.mean(accs))


def test_fovea_branch_not_worse_on_synthetic_scenes():
    spec = SceneSpec()
    table = spec.class_table()
    scenes = [generate_scene(SceneSpec(rng_seed=s)) for s in range(6)]
    t = compute_average_sizes([s.instances for s in scenes], table)
    for k, scene in enumerate(scenes):
        h = heatmap_h(scene.instances, t)
        clf = OracleClassifier(scene, OracleConfig(rng_seed=k), spec.num_labels, spec.confusable())
        fused, rect = run_pipeline(scene.image, clf, heatmap_v(h, h, 1.0))
        coarse = clf(scene.image, BranchView())
        inside = np.zeros(scene.gt.shape, bool)
        inside[rect.slices] = True
        assert _instance_accuracy(fused.argmax(-1), scene, inside) >= \
            _instance_accuracy(coarse.argmax(-1), scene, inside), k
