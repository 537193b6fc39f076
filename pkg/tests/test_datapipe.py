import numpy as np
import pytest
from PIL import Image

from bicubicpp.datapipe import (
    ImagePair,
    MemoryCache,
    load_png,
    pair_manifest,
    preload,
    prepare_pairs,
    sample_batch,
    save_png,
)
from bicubicpp.errors import ConfigError, FormatError, ShapeError
from bicubicpp.metrics import bicubic_resize
from helpers import synth_image


@pytest.fixture
def hr_dir(tmp_path):
    rng = np.random.default_rng(42)
    d = tmp_path / "hr"
    d.mkdir()
    for i in range(3):
        save_png(synth_image(rng, 96, 96), d / f"img{i}.png")
    return d


class TestPngIo:
    def test_round_trip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(0)
        t = rng.random((3, 16, 16)).astype(np.float32)
        path = tmp_path / "x.png"
        save_png(t, path)
        back = load_png(path)
        assert np.max(np.abs(back - t)) <= 1.0 / 510.0

    def test_endpoints_exact(self, tmp_path):
        t = np.zeros((3, 4, 4), dtype=np.float32)
        t[:, :, 2:] = 1.0
        path = tmp_path / "e.png"
        save_png(t, path)
        back = load_png(path)
        assert back.min() == 0.0 and back.max() == 1.0

    def test_grayscale_rejected(self, tmp_path):
        path = tmp_path / "g.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(FormatError):
            load_png(path)

    def test_16bit_rejected(self, tmp_path):
        path = tmp_path / "d.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint16)).save(path)
        assert Image.open(path).mode != "RGB"
        with pytest.raises(FormatError):
            load_png(path)


class TestPreparePairs:
    def test_shapes_divide(self, hr_dir):
        pairs = prepare_pairs(hr_dir)
        for p in pairs:
            assert p.hr.shape == (3, 96, 96)
            assert p.lr.shape == (3, 32, 32)

    def test_odd_dims_center_cropped(self, tmp_path):
        d = tmp_path / "hr"
        d.mkdir()
        save_png(synth_image(np.random.default_rng(1), 97, 97), d / "a.png")
        (pair,) = prepare_pairs(d)
        assert pair.hr.shape == (3, 96, 96)

    def test_high_quality_close_to_pure_downscale(self, tmp_path):
        d = tmp_path / "hr"
        d.mkdir()
        # neutral (R=G=B) gradient: constant chroma, so 4:2:0 subsampling
        # contributes nothing and quality-100 is lossless-ish
        yy, xx = np.meshgrid(np.linspace(0.2, 0.8, 96), np.linspace(0.3, 0.7, 96), indexing="ij")
        g = (yy + xx) / 2
        img = np.stack([g, g, g]).astype(np.float32)
        save_png(img, d / "g.png")
        (pair,) = prepare_pairs(d, jpeg_q=100)
        hr = load_png(d / "g.png")
        clean = bicubic_resize(hr, 32, 32)
        assert np.max(np.abs(pair.lr - clean)) <= 2.0 / 255.0

    def test_q90_actually_degrades(self, hr_dir):
        pairs_q90 = prepare_pairs(hr_dir, jpeg_q=90)
        hr = load_png(sorted(hr_dir.iterdir())[0])
        clean = bicubic_resize(hr, 32, 32)
        assert np.max(np.abs(pairs_q90[0].lr - clean)) > 1.0 / 255.0

    def test_pre_degraded_lr_dir_skips_codec(self, tmp_path, hr_dir):
        lr_dir = tmp_path / "lr"
        lr_dir.mkdir()
        rng = np.random.default_rng(3)
        for f in sorted(hr_dir.iterdir()):
            save_png(rng.random((3, 32, 32)).astype(np.float32), lr_dir / f.name)
        pairs = prepare_pairs(hr_dir, lr_dir=lr_dir)
        expected = load_png(lr_dir / "img0.png")
        assert np.array_equal(pairs[0].lr, expected)

    def test_empty_dir_rejected(self, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        with pytest.raises(ConfigError):
            prepare_pairs(empty)

    def test_manifest_fields(self, hr_dir):
        pairs = prepare_pairs(hr_dir)
        man = pair_manifest(pairs)
        assert [m["id"] for m in man] == ["img0", "img1", "img2"]
        assert all(len(m["sha256"]) == 64 for m in man)
        assert man[0]["lr_dims"] == [3, 32, 32]


class TestSampleBatch:
    def test_shapes_at_configured_patch(self, hr_dir):
        pairs = prepare_pairs(hr_dir)
        batch = sample_batch(pairs, 8, 24, np.random.default_rng(0))
        assert batch.lr.shape == (8, 3, 24, 24)
        assert batch.hr.shape == (8, 3, 72, 72)

    def test_deterministic_under_seed(self, hr_dir):
        pairs = prepare_pairs(hr_dir)
        a = sample_batch(pairs, 4, 16, np.random.default_rng(7))
        b = sample_batch(pairs, 4, 16, np.random.default_rng(7))
        assert np.array_equal(a.lr, b.lr) and np.array_equal(a.hr, b.hr)

    def test_augmentation_preserves_pixel_multiset(self, hr_dir):
        # rotation/flip permutes pixels: multiset of values per patch must
        # exist in the raw image crops
        pairs = prepare_pairs(hr_dir)
        rng = np.random.default_rng(11)
        batch = sample_batch(pairs, 16, 16, rng)
        raw = np.concatenate([p.lr.reshape(3, -1) for p in pairs], axis=1)
        for b in range(16):
            vals = np.sort(batch.lr[b].reshape(3, -1), axis=1)
            # every sampled value appears in some source image
            for c in range(3):
                assert np.isin(vals[c], raw[c]).all()

    def test_correspondence_without_augmentation(self, hr_dir):
        # force k=0/flip=False by resampling until the transform is identity
        pairs = prepare_pairs(hr_dir)
        rng = np.random.default_rng(0)
        found = False
        for _ in range(64):
            state = rng.bit_generator.state
            batch = sample_batch(pairs, 1, 16, rng)
            rng2 = np.random.default_rng()
            rng2.bit_generator.state = state
            idx = rng2.integers(len(pairs))
            y = int(rng2.integers(32 - 16 + 1))
            x = int(rng2.integers(32 - 16 + 1))
            k = int(rng2.integers(4))
            flip = bool(rng2.integers(2))
            if k == 0 and not flip:
                hr = pairs[idx].hr[:, 3 * y : 3 * (y + 16), 3 * x : 3 * (x + 16)]
                assert np.array_equal(batch.hr[0], hr)
                found = True
                break
        assert found

    def test_same_transform_on_both(self):
        # HR made of constant 3x3 cells replicating LR: any shared
        # rotation/flip must keep each LR pixel equal to its whole HR cell
        rng = np.random.default_rng(3)
        lr = rng.random((3, 12, 12)).astype(np.float32)
        hr = np.kron(lr, np.ones((3, 3), dtype=np.float32))
        pairs = [ImagePair(hr=hr, lr=lr, id="p")]
        batch = sample_batch(pairs, 16, 8, rng)
        for dy in range(3):
            for dx in range(3):
                np.testing.assert_array_equal(batch.lr, batch.hr[:, :, dy::3, dx::3])

    def test_patch_too_large(self, hr_dir):
        pairs = prepare_pairs(hr_dir)
        with pytest.raises(ShapeError):
            sample_batch(pairs, 1, 64, np.random.default_rng(0))

    def test_odd_patch_rejected(self, hr_dir):
        pairs = prepare_pairs(hr_dir)
        with pytest.raises(ConfigError):
            sample_batch(pairs, 1, 15, np.random.default_rng(0))

    def test_empty_pairs_rejected(self):
        with pytest.raises(ConfigError):
            sample_batch([], 1, 8, np.random.default_rng(0))


class TestPreload:
    def test_cache_accounting(self, hr_dir):
        pairs = prepare_pairs(hr_dir)
        cache = preload(pairs)
        assert cache.nbytes == sum(p.nbytes for p in pairs)
        assert len(cache) == 3

    def test_sampling_from_cache_opens_no_files(self, hr_dir, monkeypatch):
        import builtins

        pairs = prepare_pairs(hr_dir)
        cache = preload(pairs)
        opened = []
        real_open = builtins.open

        def counting_open(*args, **kwargs):
            opened.append(args[0])
            return real_open(*args, **kwargs)

        monkeypatch.setattr(builtins, "open", counting_open)
        sample_batch(cache, 4, 16, np.random.default_rng(0))
        assert opened == []

    def test_empty_cache(self):
        cache = preload([])
        assert cache.nbytes == 0
        with pytest.raises(ConfigError):
            sample_batch(cache, 1, 8, np.random.default_rng(0))
