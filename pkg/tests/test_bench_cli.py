import json
import time

import numpy as np
import pytest

import main
from models import EnsembleSpec, PhantomConfig, VolumeGrid
from nn.architectures import build_tnet, build_unet
from services.bench_service import BenchService
from services.ensemble_service import EnsembleModel
from services.file_service import FileService
from utils.metrics import TABLE_COLUMNS

class SleepingPredictor:
    def __init__(self, seconds: float, value: float = 0.9):
        self.seconds = seconds
        self.value = value
        self.calls = 0

    def predict_proba(self, batch):
        self.calls += 1
        time.sleep(self.seconds)
        return np.full(np.shape(batch), self.value)

@pytest.fixture
def patches(rng):
    return rng.uniform(0, 1, (4, 1, 128, 128)).astype(np.float32)

class TestBench:
    def test_latency_protocol(self, patches):
        result = BenchService().bench_latency(SleepingPredictor(0.002), patches, warmup=5, reps=30, name="slow")
        assert result.samples == 30
        assert result.mean_latency_ms >= 2.0
        assert result.patch_resolution == "128x128"
        assert result.model == "slow"
        assert result.miou is None
        assert "numpy" in result.environment

    @pytest.mark.parametrize("warmup,reps", [(5, 29), (4, 30)])
    def test_protocol_minimums(self, patches, warmup, reps):
        with pytest.raises(ValueError, match="Protocole"):
            BenchService().bench_latency(SleepingPredictor(0.0), patches, warmup=warmup, reps=reps)

    def test_quality_is_reported_with_truths(self, patches):
        truths = np.ones((4, 128, 128), dtype=np.uint8)
        result = BenchService().bench_latency(SleepingPredictor(0.0), patches, 5, 30, "p", truths)
        assert result.miou == 1.0 and result.mdsc == 1.0

    def test_ensemble_matches_independently_measured_parts(self, patches):
        unet, ynet = SleepingPredictor(0.002), SleepingPredictor(0.004, 0.1)
        enet = EnsembleModel({"unet": unet, "ynet": ynet}, EnsembleSpec(weights={"unet": 0.5, "ynet": 0.5}))
        bench = BenchService().bench_ensemble(enet, patches, warmup=5, reps=30)
        # Une série par composant, une pour la combinaison, une pour l'E-Net
        assert unet.calls == ynet.calls == 35 + len(patches) + 35
        slowest = max(r.mean_latency_ms for r in bench.components.values())
        assert bench.ensemble.mean_latency_ms >= slowest
        parts = sum(r.mean_latency_ms for r in bench.components.values()) + bench.combination_ms
        assert abs(bench.ensemble.mean_latency_ms - parts) <= 0.2 * parts
        assert bench.ensemble.model == "enet"
        assert sorted(bench.components) == ["unet", "ynet"]

    def test_combination_is_timed_alone(self, patches):
        slow = SleepingPredictor(0.005)
        enet = EnsembleModel({"unet": slow}, EnsembleSpec(weights={"unet": 1.0}))
        combination_ms = BenchService().bench_combination(enet, patches, warmup=5, reps=30)
        assert 0 <= combination_ms < 5.0
        assert slow.calls == len(patches)

class TestCli:
    @pytest.fixture
    def phantom_config(self, tmp_path):
        cfg = PhantomConfig(dims=(2, 256, 256), electrode_thickness=32, dendrite_count=3, max_steps=20, seed=0)
        path = tmp_path / "phantom_config.json"
        path.write_text(cfg.model_dump_json())
        return path

    def test_phantom_is_reproducible(self, tmp_path, phantom_config, capsys):
        for name in ("a", "b"):
            code = main.main(["phantom", "--seed", "11", "--out", str(tmp_path / name), "--config", str(phantom_config)])
            assert code == 0
        for stem in ("volume.raw", "mask.raw", "volume.json"):
            assert (tmp_path / "a" / stem).read_bytes() == (tmp_path / "b" / stem).read_bytes()
        report = json.loads(capsys.readouterr().out.splitlines()[0])
        assert report["voxel_size_um"] == pytest.approx(1.33)
        assert json.loads((tmp_path / "a" / "phantom.json").read_text())["seed"] == 11

    def test_patchify_counts(self, tmp_path, phantom_config, capsys):
        main.main(["phantom", "--seed", "1", "--out", str(tmp_path / "ph"), "--config", str(phantom_config)])
        capsys.readouterr()
        code = main.main(["patchify", "--in", str(tmp_path / "ph" / "volume"), "--mask", str(tmp_path / "ph" / "mask"),
                          "--out", str(tmp_path / "ds"), "--seed", "3"])
        assert code == 0
        counts = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
        assert sum(int(v) for v in counts.values()) == 8
        assert (tmp_path / "ds" / "index.json").exists()

    @pytest.mark.parametrize("argv", [["phantom", "--out", "x"], ["unknown"], []])
    def test_usage_errors_exit_with_two(self, argv):
        assert main.main(argv) == 2

    def test_missing_file_exits_with_one(self, tmp_path, capsys):
        code = main.main(["invert", "--in", str(tmp_path / "absent"), "--out", str(tmp_path / "out")])
        assert code == 1
        assert capsys.readouterr().err.startswith("error: FileNotFoundError:")

    def test_domain_error_exits_with_one(self, tmp_path, capsys):
        FileService().save_volume(VolumeGrid(data=np.zeros((2, 4, 4), dtype=np.uint8)), tmp_path / "v")
        code = main.main(["crop", "--in", str(tmp_path / "v"), "--out", str(tmp_path / "c"),
                          "--lo", "0", "0", "0", "--hi", "3", "4", "4"])
        assert code == 1
        assert capsys.readouterr().err.startswith("error: ValueError:")

    def test_negative_seed(self, tmp_path, capsys):
        assert main.main(["phantom", "--seed", "-1", "--out", str(tmp_path)]) == 1
        assert "Graine" in capsys.readouterr().err

    @pytest.fixture
    def checkpoints(self, tmp_path, disk_patches):
        files = FileService()
        files.save_patch_dataset(tmp_path / "ds", {"train": disk_patches[:4], "val": disk_patches[4:6],
                                                   "test": disk_patches[6:]}, 128)
        return {
            "tnet": str(files.save_checkpoint(build_tnet(0).to_dtype(np.float32), tmp_path / "tnet.ckpt")),
            "unet": str(files.save_checkpoint(build_unet(0).to_dtype(np.float32), tmp_path / "unet.ckpt")),
        }

    def test_evaluate_table(self, tmp_path, checkpoints, capsys):
        out = tmp_path / "table.tsv"
        code = main.main(["evaluate", "--checkpoint", checkpoints["tnet"], "--in", str(tmp_path / "ds"), "--out", str(out)])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split("\t") == list(TABLE_COLUMNS)
        fields = lines[1].split("\t")
        assert fields[0] == "tnet"
        assert 0 <= float(fields[1]) <= 1
        assert fields[3] == ""
        assert fields[4] == "128x128"
        assert out.read_text().splitlines() == lines

    def test_ensemble_search_and_evaluate(self, tmp_path, checkpoints, capsys):
        spec_path = tmp_path / "enet.json"
        code = main.main(["ensemble-search", "--checkpoint", checkpoints["tnet"], "--checkpoint", checkpoints["unet"],
                          "--in", str(tmp_path / "ds"), "--grid-step", "0.5", "--out", str(spec_path)])
        assert code == 0
        spec = EnsembleSpec.model_validate_json(spec_path.read_text())
        assert sorted(spec.weights) == ["tnet", "unet"]
        capsys.readouterr()

        code = main.main(["evaluate", "--checkpoint", checkpoints["tnet"], "--checkpoint", checkpoints["unet"],
                          "--ensemble", str(spec_path), "--in", str(tmp_path / "ds")])
        assert code == 0
        names = [line.split("\t")[0] for line in capsys.readouterr().out.splitlines()[1:]]
        assert names == ["tnet", "unet", "enet"]

    def test_ambiguous_prediction(self, tmp_path, checkpoints, capsys):
        code = main.main(["predict", "--checkpoint", checkpoints["tnet"], "--checkpoint", checkpoints["unet"],
                          "--in", str(tmp_path / "v"), "--out", str(tmp_path / "m")])
        assert code == 1
        assert "ambiguë" in capsys.readouterr().err
