import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import TINY, run_cli
from facedet.config import ConfigError, DetectorConfig
from facedet.dataio import generate_synthetic_dataset
from oracles import iou_scalar

TINY_ARGS = [a for s in TINY for a in ("--set", s)]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """A 3-iteration tiny-network run: cheap checkpoints for the plumbing tests."""
    root = tmp_path_factory.mktemp("tiny")
    generate_synthetic_dataset(root / "data", 3, seed=2)
    args = TINY_ARGS + ["--set", f'io.data_root="{root / "data"}"']
    code, out = run_cli(["train", *args, "--iterations", "3", "--out", str(root / "run")])
    assert code == 0
    return root, args, json.loads(out)


class TestTrain:
    def test_single_image_overfit_halves_loss(self, single_face_run):
        assert single_face_run.code == 0
        s = single_face_run.summary
        assert s["iteration"] == 500
        assert s["final_loss"] < s["initial_loss"] / 2

    def test_writes_run_artifacts(self, tiny_run):
        root, _, summary = tiny_run
        run = root / "run"
        assert summary["iteration"] == 3 and (run / "ckpt_0000003.npz").exists()
        assert len((run / "train_log.jsonl").read_text().splitlines()) == 3
        saved = DetectorConfig.load(run / "config.ini")
        assert saved.content_hash() == summary["config_hash"]

    def test_resume_continues(self, tiny_run, tmp_path):
        root, args, _ = tiny_run
        run = tmp_path / "run"
        shutil.copytree(root / "run", run)
        code, out = run_cli(["train", *args, "--iterations", "2", "--resume", "--out", str(run)])
        assert code == 0 and json.loads(out)["iteration"] == 5
        log = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
        assert [r["iteration"] for r in log] == [0, 1, 2, 3, 4]

    def test_resume_without_checkpoint(self, tiny_run, tmp_path, capsys):
        _, args, _ = tiny_run
        code, _ = run_cli(["train", *args, "--resume", "--iterations", "1", "--out", str(tmp_path)])
        assert code == 1 and "no checkpoint" in capsys.readouterr().err

    def test_bad_key_names_the_key(self, tmp_path, capsys):
        code, _ = run_cli(["train", "--set", "optim.lr_peek=0.1", "--out", str(tmp_path)])
        assert code != 0 and "lr_peek" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        code, _ = run_cli(["train", "--set", f'io.data_root="{tmp_path / "nope"}"', "--out", str(tmp_path)])
        assert code == 1


class TestEvaluate:
    def test_metrics_and_plot(self, single_face_run, tmp_path):
        out = tmp_path / "eval"
        code, text = run_cli(["evaluate", *single_face_run.args, "--checkpoint", str(single_face_run.run),
                              "--out", str(out), "--plot", "--method", "desk"])
        assert code == 0
        aps = json.loads(text)
        assert aps["easy"] == pytest.approx(1.0)
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["easy"] == aps["easy"]
        assert "desk (1.000)" in (out / "pr.svg").read_text()
        assert single_face_run.record.path in (out / "detections.txt").read_text()

    def test_missing_checkpoint(self, tiny_run, tmp_path):
        _, args, _ = tiny_run
        code, _ = run_cli(["evaluate", *args, "--checkpoint", str(tmp_path / "none.npz")])
        assert code == 1
        code, _ = run_cli(["evaluate", *args, "--checkpoint", str(tmp_path)])
        assert code == 1

    def test_hash_mismatch_refused(self, tiny_run, tmp_path, capsys):
        root, args, _ = tiny_run
        code, _ = run_cli(["evaluate", *args, "--set", "losses.mining_ratio=4",
                           "--checkpoint", str(root / "run"), "--out", str(tmp_path)])
        assert code == 1 and "config" in capsys.readouterr().err
        assert not (tmp_path / "metrics.json").exists()


class TestDetect:
    def test_untrained_blank_image_at_full_threshold(self, tiny_run, tmp_path):
        root, args, _ = tiny_run
        Image.fromarray(np.zeros((128, 128, 3), dtype=np.uint8)).save(tmp_path / "blank.png")
        code, out = run_cli(["detect", *args, "--checkpoint", str(root / "run" / "ckpt_0000003.npz"),
                             "--image", str(tmp_path / "blank.png"), "--min-score", "1.0"])
        assert code == 0 and json.loads(out) == []

    def test_overfit_image_gives_one_box(self, single_face_run):
        image = single_face_run.data / "images" / single_face_run.record.path
        code, out = run_cli(["detect", *single_face_run.args, "--checkpoint", str(single_face_run.run),
                             "--image", str(image), "--min-score", "0.5"])
        assert code == 0
        found = json.loads(out)
        assert len(found) == 1
        gt = single_face_run.record.xyxy()[0].tolist()
        assert iou_scalar(found[0]["box"], gt) >= 0.8

    def test_unreadable_image(self, tiny_run, tmp_path, capsys):
        root, args, _ = tiny_run
        (tmp_path / "bad.png").write_bytes(b"not an image")
        code, _ = run_cli(["detect", *args, "--checkpoint", str(root / "run"), "--image", str(tmp_path / "bad.png")])
        assert code == 1 and "cannot read image" in capsys.readouterr().err
        code, _ = run_cli(["detect", *args, "--checkpoint", str(root / "run"), "--image", str(tmp_path / "x.png")])
        assert code == 1


class TestSampleStats:
    def test_zero_draws(self):
        code, out = run_cli(["sample-stats", "-n", "0"])
        report = json.loads(out)
        assert code == 0 and report["n_draws"] == 0
        assert report["strategies"]["bdas"]["band_fraction"] is None

    def test_fixed_seed_is_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli(["sample-stats", "-n", "300", "--seed", "4", "--out", str(tmp_path / name)])[0] == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        report = json.loads((tmp_path / "a").read_text())
        assert set(report["strategies"]) == {"bdas", "das", "ssd", "mixture"}

    def test_strategy_subset(self):
        code, out = run_cli(["sample-stats", "-n", "20", "--strategies", "das,bdas"])
        assert code == 0 and set(json.loads(out)["strategies"]) == {"bdas", "das"}
        assert run_cli(["sample-stats", "-n", "20", "--strategies", "bdas,nope"])[0] == 1

    def test_dataset_corpus(self, tiny_run):
        _, args, _ = tiny_run
        code, out = run_cli(["sample-stats", *args, "--dataset", "-n", "50"])
        assert code == 0 and json.loads(out)["strategies"]["das"]["faces"] > 0


class TestPlotPR:
    def test_from_metrics(self, tmp_path):
        metrics = {"easy": 1.0, "curves": {"easy": {"thresholds": [0.9], "precision": [1.0], "recall": [1.0],
                                                    "ap": 1.0}}}
        (tmp_path / "m.json").write_text(json.dumps(metrics))
        code, _ = run_cli(["plot-pr", "--metrics", str(tmp_path / "m.json"), "--out", str(tmp_path / "p.svg")])
        assert code == 0 and "ours (1.000)" in (tmp_path / "p.svg").read_text()

    def test_bad_metrics(self, tmp_path):
        (tmp_path / "m.json").write_text("{}")
        assert run_cli(["plot-pr", "--metrics", str(tmp_path / "m.json"), "--out", str(tmp_path / "p.svg")])[0] == 1
        assert run_cli(["plot-pr", "--metrics", str(tmp_path / "x.json"), "--out", str(tmp_path / "p.svg")])[0] == 1


class TestConfig:
    def test_round_trip_and_hash(self, tmp_path):
        cfg = DetectorConfig().with_overrides(["optim.lr_peak=0.02", "match.context_ratios=[1, 2]",
                                               "losses.context_branch_weights=[1.0, 0.5]"])
        cfg.save(tmp_path / "c.ini")
        back = DetectorConfig.load(tmp_path / "c.ini")
        assert back == cfg and back.content_hash() == cfg.content_hash()
        assert back.dumps() == cfg.dumps()

    def test_hash_tracks_training_settings_only(self):
        base = DetectorConfig()
        assert base.with_overrides(["optim.lr_peak=0.02"]).content_hash() != base.content_hash()
        for runtime in ("eval.nms_iou=0.4", "io.output_dir=\"x\"", "deterministic=false",
                        "optim.checkpoint_every=7"):
            assert base.with_overrides([runtime]).content_hash() == base.content_hash()

    @pytest.mark.parametrize("override, name", [
        ("optim.nope=1", "nope"), ("nosection.key=1", "nosection"), ("sampler.bdas_probability=1.5", "bdas"),
        ("optim.lr_start=1", "lr_start"), ("anchors.strides=[2, 4]", "strides"), ("seed", "seed"),
    ])
    def test_invalid_rejected(self, override, name):
        with pytest.raises(ConfigError, match=name):
            DetectorConfig().with_overrides([override])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-4, 1.0), st.integers(1, 64), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
    def test_overrides_round_trip(self, lr, batch, p, seed):
        cfg = DetectorConfig().with_overrides([f"optim.lr_peak={lr!r}", f"optim.batch_size={batch}",
                                               f"sampler.bdas_probability={p!r}", f"seed={seed}"])
        assert cfg.optim.lr_peak == lr and cfg.sampler.bdas_probability == p and cfg.seed == seed
        assert DetectorConfig.loads(cfg.dumps()) == cfg

    def test_config_file_drives_the_cli(self, tmp_path):
        cfg = DetectorConfig().with_overrides(["sampler.bdas_probability=0.0"])
        cfg.save(tmp_path / "c.ini")
        code, out = run_cli(["sample-stats", "--config", str(tmp_path / "c.ini"), "-n", "3000"])
        strategies = json.loads(out)["strategies"]
        assert code == 0
        # a zero BDAS probability turns the mixture into pure SSD cropping
        assert strategies["mixture"]["mean_log2_size"] == pytest.approx(strategies["ssd"]["mean_log2_size"], abs=0.1)
        _, default = run_cli(["sample-stats", "-n", "3000"])
        assert abs(json.loads(default)["strategies"]["mixture"]["mean_log2_size"]
                   - strategies["mixture"]["mean_log2_size"]) > 0.15
