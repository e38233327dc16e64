import json

import numpy as np
import pytest

from models import AugmentConfig, PatchMeta, Plane, SplitSpec, VolumeGrid
from services.dataset_service import DatasetService, patch_offsets, sample_rng
from services.file_service import FileService
from tests.conftest import make_patch

@pytest.fixture
def dataset():
    return DatasetService()

class TestPatchify:
    @pytest.mark.parametrize("size,stride,expected", [
        (200, 128, [0, 72]),
        (256, 128, [0, 128]),
        (128, 64, [0]),
        (256, 64, [0, 64, 128]),
        (300, 100, [0, 100, 172]),
    ])
    def test_offsets(self, size, stride, expected):
        assert patch_offsets(size, 128, stride) == expected

    def test_offsets_reject_small_slices(self):
        with pytest.raises(ValueError):
            patch_offsets(100, 128, 128)
        with pytest.raises(ValueError):
            patch_offsets(256, 128, 0)

    @pytest.mark.parametrize("stride,count", [(128, 6), (64, 15)])
    def test_patch_count(self, dataset, rng, stride, count):
        image = rng.uniform(0, 1, (256, 384)).astype(np.float32)
        samples = dataset.patchify(image, np.zeros((256, 384), dtype=np.uint8), 128, stride, "scan", 3)
        assert len(samples) == count
        first = samples[1]
        assert first.meta.slice_index == 3
        np.testing.assert_array_equal(first.image, image[first.meta.y:first.meta.y + 128, first.meta.x:first.meta.x + 128])

    def test_mismatched_image_and_mask(self, dataset):
        with pytest.raises(ValueError):
            dataset.patchify(np.zeros((128, 128), dtype=np.float32), np.zeros((128, 256), dtype=np.uint8))

    def test_volume_to_patches_by_plane(self, dataset, rng):
        volume = VolumeGrid(data=rng.integers(0, 255, (2, 128, 256)).astype(np.uint8))
        mask = VolumeGrid(data=(rng.uniform(0, 1, (2, 128, 256)) > 0.5).astype(np.uint8))
        samples = dataset.volume_to_patches(volume, mask, Plane.XY, 128, 128)
        assert len(samples) == 4
        assert all(s.image.dtype == np.float32 and s.image.max() <= 1 for s in samples)
        with pytest.raises(ValueError):
            dataset.volume_to_patches(volume, mask, Plane.XZ, 128, 128)

class TestStitch:
    def test_roundtrip_with_overlap(self, dataset, rng):
        image = rng.uniform(0, 1, (200, 328)).astype(np.float32)
        tiles = dataset.patchify(image, np.zeros(image.shape, dtype=np.uint8), 128, 64)
        np.testing.assert_allclose(dataset.stitch(tiles, image.shape), image, atol=1e-7)

    def test_overlap_is_averaged(self, dataset):
        tiles = [(np.zeros((4, 4)), PatchMeta(volume_id="s", slice_index=0, y=0, x=0)),
                 (np.ones((4, 4)), PatchMeta(volume_id="s", slice_index=0, y=0, x=2))]
        out = dataset.stitch(tiles, (4, 6))
        np.testing.assert_allclose(out[:, :2], 0.0)
        np.testing.assert_allclose(out[:, 2:4], 0.5)
        np.testing.assert_allclose(out[:, 4:], 1.0)
        np.testing.assert_array_equal(dataset.stitch(tiles, (4, 6), threshold=0.5)[:, 2:4], 0)

    def test_gap_is_reported(self, dataset):
        tiles = [(np.ones((4, 4)), PatchMeta(volume_id="s", slice_index=0, y=0, x=0))]
        with pytest.raises(ValueError, match="Couverture incomplète"):
            dataset.stitch(tiles, (4, 6))

    def test_tile_outside_slice(self, dataset):
        tiles = [(np.ones((4, 4)), PatchMeta(volume_id="s", slice_index=0, y=2, x=0))]
        with pytest.raises(ValueError, match="hors"):
            dataset.stitch(tiles, (4, 4))

class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(10, (8, 1, 1)), (4433, (3547, 443, 443)), (1, (1, 0, 0))])
    def test_sizes(self, dataset, n, sizes):
        train, val, test = dataset.split_dataset(list(range(n)), SplitSpec(seed=0))
        assert (len(train), len(val), len(test)) == sizes
        assert sorted(train + val + test) == list(range(n))

    def test_deterministic_per_seed(self, dataset):
        items = list(range(50))
        assert dataset.split_dataset(items, SplitSpec(seed=4)) == dataset.split_dataset(items, SplitSpec(seed=4))
        assert dataset.split_dataset(items, SplitSpec(seed=4)) != dataset.split_dataset(items, SplitSpec(seed=5))

    def test_invalid_input(self, dataset):
        with pytest.raises(ValueError):
            dataset.split_dataset([], SplitSpec(seed=0))
        with pytest.raises(ValueError):
            SplitSpec(fractions=(0.5, 0.3, 0.3), seed=0)

class TestAugment:
    @pytest.fixture
    def sample(self, rng):
        mask = (rng.uniform(0, 1, (32, 32)) > 0.7).astype(np.uint8)
        return make_patch(rng.uniform(0.1, 0.9, (32, 32)), mask)

    def test_disabled_is_identity(self, dataset, sample, rng):
        out = dataset.augment(sample, AugmentConfig.disabled(), rng)
        np.testing.assert_array_equal(out.image, sample.image)
        np.testing.assert_array_equal(out.mask, sample.mask)

    def test_horizontal_flip_twice(self, dataset, sample, rng):
        cfg = AugmentConfig.disabled().model_copy(update={"hflip": True, "probability": 1.0})
        once = dataset.augment(sample, cfg, rng)
        np.testing.assert_array_equal(once.image, sample.image[:, ::-1])
        twice = dataset.augment(once, cfg, rng)
        np.testing.assert_array_equal(twice.image, sample.image)
        np.testing.assert_array_equal(twice.mask, sample.mask)

    def test_shift_moves_content(self, dataset, sample):
        cfg = AugmentConfig.disabled().model_copy(update={"max_shift": 3, "probability": 1.0})
        out = dataset.augment(sample, cfg, np.random.default_rng(0))
        draws = np.random.default_rng(0)
        draws.random()
        dy, dx = draws.integers(-3, 4, size=2)
        np.testing.assert_array_equal(out.image[8:24, 8:24], sample.image[8 - dy:24 - dy, 8 - dx:24 - dx])

    def test_full_pipeline_keeps_invariants(self, dataset, sample):
        cfg = AugmentConfig(probability=1.0)
        for epoch in range(5):
            out = dataset.augment(sample, cfg, sample_rng(7, 0, epoch))
            assert out.image.shape == sample.image.shape
            assert out.image.dtype == np.float32
            assert 0 <= out.image.min() and out.image.max() <= 1
            assert set(np.unique(out.mask)) <= {0, 1}
            assert out.meta == sample.meta

    def test_same_stream_same_result(self, dataset, sample):
        cfg = AugmentConfig(probability=0.7)
        a = dataset.augment(sample, cfg, sample_rng(1, 2, 3))
        b = dataset.augment(sample, cfg, sample_rng(1, 2, 3))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_invalid_zoom(self):
        with pytest.raises(ValueError):
            AugmentConfig(zoom_range=(0.0, 1.0))

class TestStorage:
    def test_patch_dataset_roundtrip(self, tmp_path, disk_patches):
        files = FileService()
        splits = {"train": disk_patches[:6], "val": disk_patches[6:7], "test": disk_patches[7:]}
        files.save_patch_dataset(tmp_path / "ds", splits, 128, seed=3)

        index = json.loads((tmp_path / "ds" / "index.json").read_text())
        assert index["seed"] == 3
        assert [e["image_offset"] for e in index["entries"]][:2] == [0, 128 * 128 * 4]
        assert (tmp_path / "ds" / "masks.bin").stat().st_size == 8 * 128 * 128

        loaded = files.load_patch_dataset(tmp_path / "ds")
        assert [len(loaded[k]) for k in ("train", "val", "test")] == [6, 1, 1]
        for original, restored in zip(disk_patches[:6], loaded["train"]):
            np.testing.assert_array_equal(restored.image, original.image)
            np.testing.assert_array_equal(restored.mask, original.mask)
            assert restored.meta == original.meta

    def test_wrong_patch_size(self, tmp_path, disk_patches):
        with pytest.raises(ValueError):
            FileService().save_patch_dataset(tmp_path, {"train": disk_patches[:1]}, 64)
