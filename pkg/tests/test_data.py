import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualharm import data


def checker(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + xx) % 2).astype(np.float32)[:, :, None]


class TestForegroundRatio:
    def test_all_ones(self):
        assert data.foreground_ratio(np.ones((16, 16, 1))) == 1.0

    def test_all_zeros(self):
        assert data.foreground_ratio(np.zeros((16, 16, 1))) == 0.0

    def test_block(self):
        m = np.zeros((32, 32, 1))
        m[4:12, 10:18] = 1.0
        assert data.foreground_ratio(m) == pytest.approx(64 / 1024)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            data.foreground_ratio(np.full((4, 4, 1), 0.5))


class TestDownsampleMask:
    def test_all_ones_level4(self):
        out = data.downsample_mask(np.ones((256, 256, 1)), level=4)
        assert out.shape == (32, 32, 1)
        assert np.all(out == 1.0)

    def test_left_half_level2(self):
        m = np.zeros((256, 256, 1), dtype=np.float32)
        m[:, :128] = 1.0
        out = data.downsample_mask(m, level=2)
        assert out.shape == (128, 128, 1)
        assert np.all(out[:, :64] == 1.0)
        assert np.all(out[:, 64:] == 0.0)

    @pytest.mark.parametrize("level", [2, 3, 4])
    def test_checkerboard_tie_break(self, level):
        # every pooled cell averages exactly 0.5; >= 0.5 resolves to foreground
        out = data.downsample_mask(checker(32, 32), level=level)
        assert np.all(out == 1.0)

    def test_level1_is_identity(self):
        m = checker(8, 8)
        np.testing.assert_array_equal(data.downsample_mask(m, 1), m)

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            data.downsample_mask(np.ones((30, 30, 1)), level=3)

    def test_bad_level_rejected(self):
        with pytest.raises(ValueError, match="level"):
            data.downsample_mask(np.ones((8, 8, 1)), level=5)

    def test_idempotent_at_target_resolution(self):
        m = data.downsample_mask(checker(16, 16), level=2)
        np.testing.assert_array_equal(data.pool_mask(m, 8, 8), m)


class TestPoolMask:
    def test_pool_to_grid(self):
        m = np.zeros((16, 16, 1))
        m[:8, :8] = 1.0
        out = data.pool_mask(m, 4, 4)
        assert out.shape == (4, 4, 1)
        assert np.all(out[:2, :2] == 1.0)
        assert out.sum() == 4.0


def _sources(rng, photo_size=64, painting_size=64, frac=0.1):
    photo = rng.uniform(size=(photo_size, photo_size, 3)).astype(np.float32)
    mask = np.zeros((photo_size, photo_size, 1), dtype=np.float32)
    side = int(round(photo_size * np.sqrt(frac)))
    mask[8 : 8 + side, 8 : 8 + side] = 1.0
    painting = rng.uniform(size=(painting_size, painting_size, 3)).astype(np.float32)
    return photo, mask, painting


class TestBuildComposite:
    def test_paste_locality(self):
        rng = np.random.default_rng(0)
        photo, mask, painting = _sources(rng)
        s = data.build_composite(photo, mask, painting, rng_seed=42)
        outside = s.mask[:, :, 0] == 0.0
        np.testing.assert_array_equal(s.composite[outside], s.background[outside])
        np.testing.assert_array_equal(s.background, painting)

    def test_ratio_in_bounds(self):
        rng = np.random.default_rng(1)
        photo, mask, painting = _sources(rng, frac=0.12)
        s = data.build_composite(photo, mask, painting, rng_seed=3)
        assert 0.05 <= data.foreground_ratio(s.mask) <= 0.3

    def test_tiny_object_rejected(self):
        rng = np.random.default_rng(2)
        photo, mask, painting = _sources(rng, frac=0.02)
        with pytest.raises(data.CompositeRejected, match="below the minimum"):
            data.build_composite(photo, mask, painting, rng_seed=0)

    def test_oversized_object_scaled_down(self):
        rng = np.random.default_rng(3)
        photo, mask, painting = _sources(rng, frac=0.6)
        s = data.build_composite(photo, mask, painting, rng_seed=0)
        assert 0.05 <= data.foreground_ratio(s.mask) <= 0.3
        assert s.meta["scale"] < 1.0

    def test_larger_photo_than_painting(self):
        rng = np.random.default_rng(4)
        photo, mask, _ = _sources(rng, photo_size=128, frac=0.1)
        painting = rng.uniform(size=(64, 64, 3)).astype(np.float32)
        s = data.build_composite(photo, mask, painting, rng_seed=9)
        assert s.composite.shape == painting.shape
        assert 0.05 <= data.foreground_ratio(s.mask) <= 0.3

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        photo, mask, painting = _sources(rng)
        a = data.build_composite(photo, mask, painting, rng_seed=77)
        b = data.build_composite(photo, mask, painting, rng_seed=77)
        np.testing.assert_array_equal(a.composite, b.composite)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.meta == b.meta

    def test_different_seeds_move_object(self):
        rng = np.random.default_rng(6)
        photo, mask, painting = _sources(rng)
        metas = {
            (data.build_composite(photo, mask, painting, rng_seed=s).meta["top"],
             data.build_composite(photo, mask, painting, rng_seed=s).meta["left"])
            for s in range(8)
        }
        assert len(metas) > 1

    def test_empty_mask_rejected(self):
        rng = np.random.default_rng(7)
        photo, _, painting = _sources(rng)
        with pytest.raises(data.CompositeRejected, match="empty"):
            data.build_composite(photo, np.zeros((64, 64, 1)), painting, rng_seed=0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_paste_locality_property(self, seed):
        rng = np.random.default_rng(seed)
        frac = rng.uniform(0.06, 0.5)
        photo, mask, painting = _sources(rng, frac=frac)
        try:
            s = data.build_composite(photo, mask, painting, rng_seed=seed)
        except data.CompositeRejected:
            return
        outside = s.mask[:, :, 0] == 0.0
        np.testing.assert_array_equal(s.composite[outside], s.background[outside])
        assert 0.05 <= data.foreground_ratio(s.mask) <= 0.3


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = data.DatasetManifest(
            records=[data.ManifestRecord("a.png", "a_mask.png", "p.png")],
            split="test",
            seed=5,
        )
        path = tmp_path / "manifest.jsonl"
        data.save_manifest(m, path)
        loaded = data.load_manifest(path)
        assert loaded.split == "test"
        assert loaded.seed == 5
        assert loaded.records == m.records
        assert loaded.base_dir == tmp_path

    def test_bad_split_rejected(self):
        with pytest.raises(ValueError, match="split"):
            data.DatasetManifest(records=[], split="validation")

    def test_missing_field_diagnostic(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text('{"split": "train", "seed": 0}\n{"photo": "a.png"}\n')
        with pytest.raises(ValueError, match="line 2"):
            data.load_manifest(path)


class TestIterate:
    def test_batches_per_epoch(self, manifest16):
        batches = list(data.iterate(manifest16, batch_size=4, seed=0, image_size=64, num_epochs=1))
        assert len(batches) == 4
        assert all(len(b) == 4 for b in batches)

    def test_same_seed_same_order(self, manifest16):
        def order(seed):
            out = []
            for batch in data.iterate(manifest16, 4, seed=seed, image_size=64, num_epochs=1):
                out.extend(s.meta["photo"] for s in batch)
            return out

        assert order(3) == order(3)
        assert order(3) != order(4)

    def test_resize_applied(self, manifest16):
        batch = next(iter(data.iterate(manifest16, 2, seed=0, image_size=32, num_epochs=1)))
        for s in batch:
            assert s.composite.shape == (32, 32, 3)
            assert s.mask.shape == (32, 32, 1)
            assert set(np.unique(s.mask)) <= {0.0, 1.0}

    def test_unreadable_records_skipped(self, manifest16, tmp_path, caplog):
        import dataclasses

        bad = data.ManifestRecord("missing.png", "missing_mask.png", "missing_p.png")
        manifest = dataclasses.replace(manifest16, records=manifest16.records[:3] + [bad])
        with caplog.at_level("WARNING"):
            batches = list(data.iterate(manifest, 2, seed=0, image_size=64, num_epochs=1))
        assert sum(len(b) for b in batches) == 3
        assert any("skipping record" in r.message for r in caplog.records)

    def test_all_unreadable_fails(self, tmp_path):
        bad = data.ManifestRecord("nope.png", "nope_mask.png", "nope_p.png")
        manifest = data.DatasetManifest(records=[bad], base_dir=tmp_path)
        with pytest.raises(RuntimeError, match="no readable records"):
            list(data.iterate(manifest, 1, seed=0, image_size=64, num_epochs=1))

    def test_samples_identical_across_epochs(self, manifest16):
        epochs = list(data.iterate(manifest16, 16, seed=11, image_size=64, num_epochs=2))
        assert len(epochs) == 2
        by_photo_0 = {s.meta["photo"]: s for s in epochs[0]}
        by_photo_1 = {s.meta["photo"]: s for s in epochs[1]}
        for k in by_photo_0:
            np.testing.assert_array_equal(by_photo_0[k].composite, by_photo_1[k].composite)


class TestResize:
    def test_all_ones_mask_stays_all_ones(self):
        out = data.resize_mask(np.ones((64, 64, 1)), 32, 32)
        assert np.all(out == 1.0)

    def test_resize_image_shape(self):
        out = data.resize_image(np.zeros((16, 24, 3), dtype=np.float32), 8, 12)
        assert out.shape == (8, 12, 3)


class TestSyntheticCorpus:
    def test_generated_files(self, corpus_dir):
        photos = sorted((corpus_dir / "photos").glob("photo_*.png"))
        masks = sorted((corpus_dir / "photos").glob("*_mask.png"))
        paintings = sorted((corpus_dir / "paintings").glob("*.png"))
        assert len(masks) == 16
        assert len(photos) == 32  # photos + their masks share the glob
        assert len(paintings) == 8

    def test_masks_binary_and_nonempty(self, corpus_dir):
        for p in sorted((corpus_dir / "photos").glob("*_mask.png"))[:4]:
            m = data.load_mask_image(p)
            assert set(np.unique(m)) <= {0.0, 1.0}
            assert m.sum() > 0

    def test_image_round_trip(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3)).astype(np.float32)
        data.save_image(img, tmp_path / "x.png")
        back = data.load_image(tmp_path / "x.png")
        assert np.abs(back - img).max() <= 1 / 255 / 2 + 1e-6
