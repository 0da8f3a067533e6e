import csv
import math

import numpy as np
import pytest

from lasdepth import autodiff as ad
from lasdepth import io
from lasdepth.cli import main
from lasdepth.config import RunConfig, parse_overrides
from lasdepth.data import LaserScan
from lasdepth.errors import ConfigurationError
from lasdepth.geometry import CameraIntrinsics, GravityFrame
from lasdepth.network import DepthNet, NetworkConfig

SMALL_DATA = ["--set", "data.n_scenes=6", "--set", "data.split_ratio=0.5"]
FAST_TRAIN = ["--set", "train.batch_size=2", "--iterations", "2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["gen-data", *SMALL_DATA, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["--threads", "1", "train", "--dataset", str(dataset), "--out", str(out), *FAST_TRAIN]) == 0
    return out


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig.from_flat({"net.blocks": "scaled:8,identical:8,scaled:16,identical:16",
                                   "eval.obstacle_heights": "0.3,0.9", "net.global_skip": "false"})
        cfg.save(tmp_path / "c.txt")
        again = RunConfig.load(tmp_path / "c.txt")
        assert again == cfg
        assert again.net.blocks == (("scaled", 8), ("identical", 8), ("scaled", 16), ("identical", 16))
        assert again.eval.obstacle_heights == (0.3, 0.9)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigurationError, match="train.learning_rate"):
            RunConfig.from_flat({"train.learning_rate": "1"})
        with pytest.raises(ConfigurationError, match="bogus.x"):
            RunConfig.from_flat({"bogus.x": "1"})

    def test_bad_value(self):
        with pytest.raises(ConfigurationError, match="train.iterations"):
            RunConfig.from_flat({"train.iterations": "many"})

    def test_section_validation_surfaces(self):
        with pytest.raises(ConfigurationError):
            RunConfig.from_flat({"net.bins": "100"})

    def test_overrides(self):
        assert parse_overrides(["a.b=1", "c.d = x=y"]) == {"a.b": "1", "c.d": "x=y"}
        with pytest.raises(ConfigurationError):
            parse_overrides(["novalue"])


class TestGenData:
    def test_manifest(self, dataset):
        with open(dataset / "manifest.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 6
        assert sorted(r["split"] for r in rows) == ["test"] * 3 + ["train"] * 3
        assert (dataset / "config.txt").exists()

    def test_byte_identical_rerun(self, dataset, tmp_path):
        assert main(["gen-data", *SMALL_DATA, "--out", str(tmp_path / "again")]) == 0
        files = sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file())
        again = sorted(p.relative_to(tmp_path / "again") for p in (tmp_path / "again").rglob("*") if p.is_file())
        assert files == again
        for f in files:
            assert (dataset / f).read_bytes() == (tmp_path / "again" / f).read_bytes()

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        assert main(["gen-data", "--set", "scene.colour=1", "--out", str(tmp_path)]) == 2
        assert "scene.colour" in capsys.readouterr().err

    def test_bad_config_file_exit_2(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("net.depth = 50\n")
        assert main(["gen-data", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "o")]) == 2
        assert "net.depth" in capsys.readouterr().err


class TestTrain:
    def test_zero_iterations_is_init(self, dataset, tmp_path):
        assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path), "--iterations", "0",
                     "--seed", "4"]) == 0
        saved = ad.load_checkpoint(tmp_path / "model.ldck")
        init = DepthNet(NetworkConfig(), seed=4).state_dict()
        assert all(saved[k].tobytes() == init[k].tobytes() for k in init)
        assert RunConfig.load(tmp_path / "config.txt").train.rng_seed == 4

    def test_run_directory(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"config.txt", "model.ldck", "loss_log.csv"}
        assert len((trained / "loss_log.csv").read_text().splitlines()) == 3

    def test_cls_loss_log(self, dataset, tmp_path):
        assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path), *FAST_TRAIN,
                     "--loss", "cls"]) == 0
        log = np.loadtxt(tmp_path / "loss_log.csv", delimiter=",", skiprows=1)
        np.testing.assert_array_equal(log[:, 1], log[:, 2])     # loss = cls term; reg is logged only
        assert np.all(log[:, 3] > 0)
        assert RunConfig.load(tmp_path / "config.txt").train.alpha == 0.0

    def test_ablation_flags(self, dataset, tmp_path):
        assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path), "--iterations", "0",
                     "--ablate", "reference=off"]) == 0
        cfg = RunConfig.load(tmp_path / "config.txt")
        assert not cfg.net.use_reference and not cfg.net.global_skip

    def test_repeat_is_bit_identical(self, dataset, trained, tmp_path):
        assert main(["--threads", "1", "train", "--dataset", str(dataset), "--out", str(tmp_path), *FAST_TRAIN]) == 0
        for name in ("model.ldck", "loss_log.csv", "config.txt"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    def test_rerun_from_resolved_config(self, dataset, trained, tmp_path):
        assert main(["--threads", "1", "train", "--config", str(trained / "config.txt"),
                     "--dataset", str(dataset), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "model.ldck").read_bytes() == (trained / "model.ldck").read_bytes()

    def test_missing_dataset_exit_3(self, tmp_path):
        assert main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


class TestEvalInfer:
    def test_eval_outputs(self, dataset, trained, tmp_path):
        assert main(["eval", "--checkpoint", str(trained / "model.ldck"), "--dataset", str(dataset),
                     "--out", str(tmp_path)]) == 0
        for name in ("metrics.csv", "metrics_refined.csv", "bands.csv", "bands_refined.csv"):
            assert (tmp_path / name).exists()
        assert len((tmp_path / "bands.csv").read_text().splitlines()) == 22

    def test_eval_ground_truth_is_zero_error(self, dataset, tmp_path):
        assert main(["eval", "--use-gt", "--dataset", str(dataset), "--out", str(tmp_path)]) == 0
        with open(tmp_path / "metrics.csv") as f:
            m = {r["metric"]: float(r["value"]) for r in csv.DictReader(f)}
        assert m["rms"] == m["rel"] == m["log10"] == 0.0
        assert m["d1"] == m["d2"] == m["d3"] == 100.0

    def test_infer_output_resolution(self, dataset, trained, tmp_path):
        sample = next((dataset / "train").iterdir())
        assert main(["infer", "--checkpoint", str(trained / "model.ldck"), "--sample", str(sample),
                     "--out", str(tmp_path / "p.pfm")]) == 0
        pred = io.read_pfm(tmp_path / "p.pfm")
        assert pred.values.shape == (24, 32) and pred.valid.all()
        assert np.all((pred.values >= 0.1) & (pred.values <= 10.0))

    def test_missing_checkpoint_exit_3(self, dataset, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ldck"), "--dataset", str(dataset),
                     "--out", str(tmp_path)]) == 3

    def test_eval_needs_checkpoint(self, dataset, tmp_path):
        assert main(["eval", "--dataset", str(dataset), "--out", str(tmp_path)]) == 2


class TestRenderRef:
    def test_constant_wall(self, tmp_path):
        k = CameraIntrinsics.from_fov(64, 48, math.radians(60))
        b = np.linspace(-math.radians(30), math.radians(30), 641)
        io.write_scan_csv(tmp_path / "scan.csv", LaserScan(0.8, b, 3.0 / np.cos(b)))
        io.write_camera_meta(tmp_path / "camera.txt", k, GravityFrame((0.0, 1.0, 0.0), 1.2))
        assert main(["render-ref", "--scan", str(tmp_path / "scan.csv"), "--camera", str(tmp_path / "camera.txt"),
                     "--out", str(tmp_path / "ref.pfm")]) == 0
        ref = io.read_pfm(tmp_path / "ref.pfm")
        np.testing.assert_allclose(ref.values, 3.0, atol=1e-4)
        assert (tmp_path / "ref_extrapolated.pgm").exists()

    def test_missing_scan_exit_3(self, tmp_path):
        assert main(["render-ref", "--scan", str(tmp_path / "x.csv"), "--camera", str(tmp_path / "c.txt"),
                     "--out", str(tmp_path / "r.pfm")]) == 3


class TestObstacle:
    def test_table_scene(self, tmp_path):
        assert main(["obstacle", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "missed.csv") as f:
            missed = list(csv.DictReader(f))
        assert any(m["laser"] == "laser_20cm" for m in missed)
        sources = {line.split(",")[2] for line in (tmp_path / "obstacles.csv").read_text().splitlines()[1:]}
        assert sources == {"laser_20cm", "laser_80cm", "depth_gt"}

    def test_sample_with_model(self, dataset, trained, tmp_path):
        sample = next((dataset / "test").iterdir())
        assert main(["obstacle", "--sample", str(sample), "--checkpoint", str(trained / "model.ldck"),
                     "--out", str(tmp_path)]) == 0
        text = (tmp_path / "obstacles.csv").read_text()
        assert "depth_pred" in text
