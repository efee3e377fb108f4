import numpy as np
import pytest

from tavit.cli import main
from tavit.config import ConfigError, RunConfig, load_config, parse_config
from tavit.volume_io import read_array

from pipeline_utils import TINY_CONFIG, run_pipeline, write_config


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", "everything"]) == 1
    assert main(["gen-data", "--seed", "abc"]) == 1
    assert "usage" in capsys.readouterr().err


def test_validation_errors_exit_two(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "seg", "--config", str(cfg)]) == 2
    assert "gen-data" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate = 3\n")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert main(["gen-data", "--patients", "2", "--config", str(cfg)]) == 2


def test_stage_ordering_names_the_missing_stage(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "latent", "--config", str(cfg)]) == 2
    assert "'seg'" in capsys.readouterr().err
    assert main(["infer", "--variant", "mprvit", "--config", str(cfg)]) == 2
    assert main(["evaluate", "--config", str(cfg)]) == 2
    assert main(["report", "--config", str(cfg)]) == 2


def test_gen_data_is_deterministic(tmp_path):
    digests = []
    for name in ("a", "b"):
        cfg = write_config(tmp_path / name)
        assert main(["gen-data", "--config", str(cfg)]) == 0
        digests.append((tmp_path / name / "data" / "dataset_hash.txt").read_text())
    assert digests[0] == digests[1]
    cfg = write_config(tmp_path / "c", seed=1)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert (tmp_path / "c" / "data" / "dataset_hash.txt").read_text() != digests[0]


def test_patients_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg), "--patients", "4"]) == 0
    split = (tmp_path / "data" / "split.txt").read_text().split()
    assert len(split) == 8


def test_corrupt_volume_exits_two(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    vol = next((tmp_path / "data" / "volumes").glob("*_T1W.tav"))
    vol.write_bytes(vol.read_bytes()[:-5])
    assert main(["train", "seg", "--config", str(cfg)]) == 2


def test_full_pipeline(tmp_path, capsys):
    report = run_pipeline(tmp_path)
    out = capsys.readouterr().out
    assert "whole_tumor" in out and "p" in out
    text = (report / "aggregates.csv").read_text()
    assert "nan" not in text.lower()
    assert (report / "segmentation_aggregates.csv").exists()
    pred = next((tmp_path / "runs" / "predictions" / "mprvit").glob("*.tav"))
    _, vol = read_array(pred)
    assert vol.shape == (4, 16, 16) and 0.0 <= vol.min() and vol.max() <= 1.0
    # a checkpoint from another variant is rejected with a validation error
    cfg = tmp_path / "run.cfg"
    other = tmp_path / "runs" / "mprvit" / "model.tavc"
    assert main(["infer", "--variant", "tavit-t1w-flair", "--checkpoint", str(other), "--config", str(cfg)]) == 2


def test_nan_metrics_exit_three(tmp_path, monkeypatch):
    run_pipeline(tmp_path)
    import tavit.report as R

    monkeypatch.setattr(R.M, "psnr", lambda *a, **k: float("nan"))
    assert main(["evaluate", "--config", str(tmp_path / "run.cfg")]) == 3


# config parsing -------------------------------------------------------------

def test_config_parsing():
    values = parse_config(TINY_CONFIG + "augment = false\nsplit = 0.5,0.25,0.25  # comment\n")
    assert values["channels"] == (4, 4, 8) and values["augment"] is False
    assert values["split"] == (0.5, 0.25, 0.25)
    with pytest.raises(ConfigError):
        parse_config("patients 4")
    with pytest.raises(ConfigError):
        parse_config("patients = four")


def test_config_round_trip_and_roles():
    cfg = load_config(None, patients=8, channels=(4, 4, 8), embed_dim=8, heads=2, image_size=16)
    assert load_config(None, **parse_config(cfg.to_text())) == cfg
    seg, lat = cfg.model_config("segmentation"), cfg.model_config("latent")
    assert (seg.in_channels, lat.in_channels, cfg.model_config("tavit-t1w").in_channels) == (2, 1, 1)
    assert cfg.model_config("mprvit").seed == cfg.model_config("tavit-t1w-flair").seed
    assert len({seg.seed, lat.seed, cfg.model_config("mprvit").seed}) == 3
    assert cfg.plan("segmentation").epochs == cfg.epochs
    with pytest.raises(ConfigError):
        cfg.model_config("unet")


def test_invalid_run_configs():
    for bad in (dict(patients=2), dict(split=(0.5, 0.5, 0.5)), dict(variant="vct"), dict(image_size=18),
                dict(tumor_prob=1.5)):
        with pytest.raises(ConfigError):
            RunConfig(**bad).validate()
