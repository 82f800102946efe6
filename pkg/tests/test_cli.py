import json
import logging

import numpy as np
import pytest
import tifffile
import yaml

import shiftcd.training as training
from shiftcd.cli import main
from shiftcd.imagery import read_png_text, save_label_png, save_raster
from shiftcd.synthetic import make_pair
from shiftcd.training import parse_loss_log
from shiftcd.translator import read_container


def write_scene(root, epochs=1, **overrides):
    """A 64 x 64 pair with a 16 px change and a one-tile config."""
    pair = make_pair(size=64, square=16, seed=3)
    save_raster(root / "pre.png", pair.pre)
    save_raster(root / "post.png", pair.post)
    save_label_png(root / "reference.png", pair.reference, {0: 0, 1: 255})
    cfg = {
        "seed": 2,
        "paths": {"pre_image": "pre.png", "post_image": "post.png", "reference": "reference.png", "workdir": str(root / "run")},
        "training": {"epochs": epochs, "learning_rate": 1e-3},
        "tiling": {"tile_size": 64},
        "forest": {"n_trees": 10},
    }
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = write_scene(root, epochs=2)
    assert main(["pipeline", "--config", str(config)]) == 0
    return root, config


def test_pipeline_writes_all_artifacts(pipeline_run):
    root, _ = pipeline_run
    run = root / "run"
    for name in (
        "checkpoint.npz",
        "loss_log.csv",
        "alpha.tif",
        "weighted_style.png",
        "translated.png",
        "difference.tif",
        "threshold_map.png",
        "change_map.png",
        "detection.npz",
        "metrics.json",
        "metrics.txt",
        "config.resolved.yaml",
        "figures/loss.png",
        "figures/change_map.png",
    ):
        assert (run / name).is_file(), name
    assert len(parse_loss_log((run / "loss_log.csv").read_text())) == 2


def test_artifacts_share_digest_and_seed(pipeline_run):
    run = pipeline_run[0] / "run"
    found = []
    for name in ("change_map.png", "threshold_map.png", "translated.png", "weighted_style.png"):
        found.append(read_png_text(run / name))
    for name in ("difference.tif", "alpha.tif"):
        with tifffile.TiffFile(run / name) as tf:
            found.append(json.loads(tf.pages[0].description))
    header = dict(line[2:].split("=", 1) for line in (run / "loss_log.csv").read_text().splitlines() if line.startswith("# "))
    found.append(header)
    found.append(read_container(run / "checkpoint.npz")[1])
    found.append(read_container(run / "detection.npz")[1])
    found.append(json.loads((run / "metrics.json").read_text()))
    digests = {str(meta["config_digest"]) for meta in found}
    seeds = {str(meta["seed"]) for meta in found}
    assert len(digests) == 1 and seeds == {"2"}


def test_change_map_palette_and_forest_persisted(pipeline_run):
    from PIL import Image

    run = pipeline_run[0] / "run"
    values = set(np.unique(np.asarray(Image.open(run / "change_map.png"))))
    assert values <= {0, 255}
    arrays, manifest = read_container(run / "detection.npz")
    assert manifest["kind"] == "detector"
    assert "forest" in arrays or manifest["fallback"]


def test_skip_train_reuses_checkpoint(pipeline_run):
    root, config = pipeline_run
    ck = root / "run" / "checkpoint.npz"
    before = ck.read_bytes()
    log_before = (root / "run" / "loss_log.csv").read_bytes()
    assert main(["pipeline", "--config", str(config), "--skip-train"]) == 0
    assert ck.read_bytes() == before
    assert (root / "run" / "loss_log.csv").read_bytes() == log_before


def test_rerun_gives_identical_loss_log(pipeline_run, tmp_path):
    root, config = pipeline_run
    assert main(["train", "--config", str(config), "--workdir", str(tmp_path)]) == 0
    assert (tmp_path / "loss_log.csv").read_bytes() == (root / "run" / "loss_log.csv").read_bytes()


def test_translate_output_shape_and_digest_mismatch(pipeline_run, tmp_path):
    from shiftcd.imagery import load_raster

    root, config = pipeline_run
    ck = str(root / "run" / "checkpoint.npz")
    assert main(["translate", "--config", str(config), "--checkpoint", ck, "--workdir", str(tmp_path)]) == 0
    assert load_raster(tmp_path / "translated.png").shape == (64, 64, 3)
    code = main(["translate", "--config", str(config), "--checkpoint", ck, "--seed", "9", "--workdir", str(tmp_path)])
    assert code == 5


def test_identity_ablation_skips_training(tmp_path):
    config = write_scene(tmp_path)
    assert main(["pipeline", "--config", str(config), "--no-translation"]) == 0
    run = tmp_path / "run"
    assert not (run / "checkpoint.npz").exists()
    assert json.loads((run / "metrics.json").read_text())["percent"]["kappa"] is not None


def test_missing_post_image_names_field(tmp_path, caplog):
    config = write_scene(tmp_path)
    (tmp_path / "post.png").unlink()
    with caplog.at_level(logging.ERROR):
        assert main(["train", "--config", str(config)]) == 2
    assert "paths.post_image" in caplog.text


def test_usage_errors(tmp_path, caplog):
    bad = tmp_path / "bad.yaml"
    bad.write_text("training:\n  epoch: 3\n")
    with caplog.at_level(logging.ERROR):
        assert main(["train", "--config", str(bad)]) == 2
    assert "training.epoch" in caplog.text
    with pytest.raises(SystemExit) as exc:
        main(["detect", "--bogus"])
    assert exc.value.code == 2
    config = write_scene(tmp_path)
    assert main(["pipeline", "--config", str(config), "--skip-train"]) == 2


def test_missing_checkpoint_is_io_error(tmp_path):
    config = write_scene(tmp_path)
    assert main(["detect", "--config", str(config)]) == 3


def test_divergence_exits_numeric_and_keeps_checkpoint(tmp_path, monkeypatch):
    real = training.step_loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        wt, c, loss = real(*args)
        return (wt, c, loss * float("nan")) if calls["n"] == 2 else (wt, c, loss)

    monkeypatch.setattr(training, "step_loss", flaky)
    config = write_scene(tmp_path, epochs=3)
    assert main(["train", "--config", str(config)]) == 4
    run = tmp_path / "run"
    assert read_container(run / "checkpoint.npz")[1]["diverged"] is True
    assert len(parse_loss_log((run / "loss_log.csv").read_text())) == 1


def test_evaluate_identical_and_mismatched(tmp_path, capsys):
    ref = np.zeros((8, 8), np.uint8)
    ref[2:5, 2:6] = 1
    save_label_png(tmp_path / "ref.png", ref, {0: 0, 1: 255})
    assert main(["evaluate", str(tmp_path / "ref.png"), str(tmp_path / "ref.png"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "100.00" in out
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert report["percent"]["kappa"] == 100.0 and report["counts"]["tp"] == 12
    save_label_png(tmp_path / "small.png", ref[:4], {0: 0, 1: 255})
    assert main(["evaluate", str(tmp_path / "small.png"), str(tmp_path / "ref.png"), "--out", str(tmp_path)]) == 2
    assert main(["evaluate", str(tmp_path / "absent.png"), str(tmp_path / "ref.png")]) == 3


def test_synth_writes_pair_and_config(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", str(out), "--size", "64", "--square", "16", "--epochs", "3"]) == 0
    for name in ("pre.png", "post.png", "reference.png", "config.yaml"):
        assert (out / name).is_file()
    assert yaml.safe_load((out / "config.yaml").read_text())["training"]["epochs"] == 3
    assert main(["synth", str(out), "--size", "64"]) == 2
