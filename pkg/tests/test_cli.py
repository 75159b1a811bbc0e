import csv
import json

import numpy as np
import pytest

from fovea import cli, dataio
from fovea.config import ConfigError, RunConfig, config_from_dict, load_config

SMALL_SCENE = {"width": 48, "height": 48, "vanishing_point": [24, 20], "spread": 30.0, "num_objects": 10}


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps({"num_scenes": 2, "scene": SMALL_SCENE, "crf": {"iterations": 5}}))
    return p


@pytest.fixture
def dataset(tmp_path, small_config):
    """synth + heatmap-gt outputs shared by the per-subcommand tests."""
    assert cli.dispatch(["synth", "--config", str(small_config), "--seed", "3", "--out-dir", str(tmp_path / "ds")]) == 0
    assert cli.dispatch(["heatmap-gt", "--config", str(small_config), "--dataset", str(tmp_path / "ds" / "manifest.json"),
                         "--out-dir", str(tmp_path / "heat")]) == 0
    return tmp_path


def test_unknown_flag_is_usage_error(capsys):
    assert cli.dispatch(["pipeline", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_missing_subcommand_and_out_dir(capsys):
    assert cli.dispatch([]) == 1
    assert cli.dispatch(["synth"]) == 1
    assert "--out-dir" in capsys.readouterr().err


def test_missing_input_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.fvt"
    code = cli.dispatch(["fovea", "--heatmap", str(missing), "--out", str(tmp_path / "r.json")])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_tensor_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.fvt"
    bad.write_bytes(b"XXXX")
    assert cli.dispatch(["fovea", "--heatmap", str(bad), "--out", str(tmp_path / "r.json")]) == 2
    assert "bad.fvt" in capsys.readouterr().err


def test_unknown_config_key_names_the_field(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"crf": {"w3": 1.0}}')
    assert cli.dispatch(["pipeline", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 2
    assert "crf.w3" in capsys.readouterr().err


def test_internal_error_exit_code(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli.stages, "synth_stage", boom)
    assert cli.dispatch(["synth", "--out-dir", str(tmp_path)]) == 3
    assert "internal error" in capsys.readouterr().err


def test_config_flags_override_file(tmp_path, small_config):
    args = cli.build_parser().parse_args(["pipeline", "--config", str(small_config), "--seed", "9", "--w1", "0.5",
                                          "--fusion-mode", "average", "--win-frac", "0.4", "0.6", "--region", "central"])
    cfg = cli.resolve_config(args)
    assert cfg.seed == 9 and cfg.num_scenes == 2 and cfg.crf.iterations == 5 and cfg.crf.w1 == 0.5
    assert cfg.fusion.mode == "average" and (cfg.fusion.win_frac_w, cfg.fusion.win_frac_h) == (0.4, 0.6)
    assert cfg.metrics.region == "central" and cfg.scene.width == 48


def test_config_round_trip():
    cfg = config_from_dict({"seed": 4, "scene": SMALL_SCENE, "oracle": {"rho_max": 0.2}})
    again = config_from_dict(cfg.to_json())
    assert again == cfg
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"seed": "x"})
    with pytest.raises(ConfigError, match="metrics"):
        config_from_dict({"metrics": {"region": "middle"}})
    assert RunConfig().fusion.upscale_factor == 2


def test_load_config_malformed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(p)


def test_stage_subcommands_chain(dataset, small_config):
    t = dataset
    heat = t / "heat" / "scene_000.v.fvt"
    assert cli.dispatch(["fovea", "--heatmap", str(heat), "--out", str(t / "rect.json"), "--stride", "1"]) == 0
    rect = json.loads((t / "rect.json").read_text())
    assert set(rect) == {"x0", "y0", "width", "height", "mean_score"} and rect["width"] == 24

    assert cli.dispatch(["global-prior", str(t / "heat" / "scene_000.h.fvt"), str(t / "heat" / "scene_001.h.fvt"),
                         "--size", "24", "24", "--out", str(t / "g.fvt")]) == 0
    assert dataio.read_tensor(t / "g.fvt").shape == (24, 24)

    ds = t / "ds"
    assert cli.dispatch(["parse", "--config", str(small_config), "--classifier", "synthetic-oracle",
                         "--image", str(ds / "scene_000.ppm"), "--heatmap", str(heat), "--gt", str(ds / "scene_000.gt.pgm"),
                         "--annotation", str(ds / "scene_000.ann.json"), "--classes", str(t / "heat" / "classes.json"),
                         "--out-dir", str(t / "parse")]) == 0
    fused = dataio.read_tensor(t / "parse" / "fused.fvt")
    assert fused.shape == (48, 48, 9)
    np.testing.assert_array_equal(dataio.read_label_map(t / "parse" / "labels.pgm"), fused.argmax(-1))

    params = t / "params.json"
    params.write_text('{"iterations": 3, "w2": 2.0}')
    assert cli.dispatch(["crf", "--scores", str(t / "parse" / "fused.fvt"), "--image", str(ds / "scene_000.ppm"),
                         "--boxes", str(ds / "scene_000.boxes.json"), "--heatmap", str(heat), "--params", str(params),
                         "--trace", str(t / "trace.csv"), "--out-dir", str(t / "crf")]) == 0
    rows = list(csv.reader(open(t / "trace.csv")))
    assert rows[0] == ["iteration", "energy"] and len(rows) == 1 + 4

    # eval expects predictions named after the ground-truth stems
    pred_dir = t / "pred"
    pred_dir.mkdir()
    (pred_dir / "scene_000.pgm").write_bytes((t / "crf" / "labels.pgm").read_bytes())
    gt_dir = t / "gt"
    gt_dir.mkdir()
    for suffix in (".gt.pgm", ".ann.json"):
        (gt_dir / f"scene_000{suffix}").write_bytes((ds / f"scene_000{suffix}").read_bytes())
    assert cli.dispatch(["eval", "--pred-dir", str(pred_dir), "--gt-dir", str(gt_dir), "--classes",
                         str(t / "heat" / "classes.json"), "--region", "peripheral", "--out-dir", str(t / "eval")]) == 0
    header = next(csv.reader(open(t / "eval" / "metrics.csv")))
    assert header == ["class", "IoU", "iIoU"]
    summary = json.loads((t / "eval" / "summary.json").read_text())
    assert set(summary["means"]) == {"iou_class", "iiou_class", "iou_category", "iiou_category"}


def test_parse_with_file_classifier(dataset):
    t = dataset
    rng = np.random.default_rng(0)
    dataio.write_tensor(rng.normal(size=(48, 48, 4)).astype(np.float32), t / "coarse.fvt")
    assert cli.dispatch(["parse", "--image", str(t / "ds" / "scene_001.ppm"), "--heatmap",
                         str(t / "heat" / "scene_001.v.fvt"), "--coarse-scores", str(t / "coarse.fvt"),
                         "--out-dir", str(t / "p")]) == 0
    # without fovea scores the crop replays the coarse scores, so fusion changes nothing
    assert dataio.read_tensor(t / "p" / "fused.fvt").tobytes() == dataio.read_tensor(t / "coarse.fvt").tobytes()
    assert cli.dispatch(["parse", "--image", str(t / "ds" / "scene_001.ppm"), "--heatmap",
                         str(t / "heat" / "scene_001.v.fvt"), "--out-dir", str(t / "p")]) == 1


def test_tune_crf(dataset, small_config):
    t = dataset
    ds = t / "ds"
    assert cli.dispatch(["parse", "--config", str(small_config), "--classifier", "synthetic-oracle",
                         "--image", str(ds / "scene_000.ppm"), "--heatmap", str(t / "heat" / "scene_000.v.fvt"),
                         "--gt", str(ds / "scene_000.gt.pgm"), "--annotation", str(ds / "scene_000.ann.json"),
                         "--classes", str(t / "heat" / "classes.json"), "--out-dir", str(ds)]) == 0
    (ds / "val.json").write_text(json.dumps([{"scores": "fused.fvt", "image": "scene_000.ppm",
                                              "boxes": "scene_000.boxes.json",
                                              "heatmap": "../heat/scene_000.v.fvt", "gt": "scene_000.gt.pgm",
                                              "annotation": "scene_000.ann.json"}]))
    (t / "grid.json").write_text(json.dumps({"base": {"iterations": 3}, "grid": {"w2": [0.0, 1.0]}}))
    assert cli.dispatch(["tune-crf", "--grid", str(t / "grid.json"), "--val", str(ds / "val.json"),
                         "--classes", str(t / "heat" / "classes.json"), "--out-dir", str(t / "tune")]) == 0
    rows = list(csv.DictReader(open(t / "tune" / "scores.csv")))
    assert [float(r["w2"]) for r in rows] == [0.0, 1.0]
    best = json.loads((t / "tune" / "best_params.json").read_text())
    assert best["iterations"] == 3


def test_pipeline_outputs_and_thread_independence(tmp_path, small_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.dispatch(["pipeline", "--config", str(small_config), "--seed", "5", "--out-dir", str(a),
                         "--emit-plots"]) == 0
    assert cli.dispatch(["pipeline", "--config", str(small_config), "--seed", "5", "--out-dir", str(b),
                         "--threads", "2"]) == 0
    for name in ("summary.json", "eval/metrics_crf.csv", "eval/metrics_fused.csv", "crf/scene_001.pgm"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    summary = json.loads((a / "summary.json").read_text())
    assert set(summary["metrics"]) == {"coarse", "fused", "crf"}
    assert "seconds" in json.loads((a / "timings.json").read_text())
    assert (a / "plots" / "metric_vs_stage.csv").exists()
    assert (a / "plots" / "energy_scene_000.csv").exists()


def test_log_level_from_env(monkeypatch, tmp_path):
    import logging

    monkeypatch.setenv("FOVEA_LOG", "DEBUG")
    cli._setup_logging(0)
    assert logging.getLogger().level == logging.DEBUG
    monkeypatch.setenv("FOVEA_LOG", "WARNING")
    cli._setup_logging(0)
    assert logging.getLogger().level == logging.WARNING
