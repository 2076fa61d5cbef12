import numpy as np
import pytest

from mppose import so3
from mppose.augment import AugmentConfig, augment, random_background
from mppose.imgio import save_png
from mppose.mesh import make_l_block
from mppose.render import Camera, crop_and_resize, render


@pytest.fixture(scope="module")
def sample():
    view = render(
        make_l_block(),
        Camera.default(64),
        (so3.sample_uniform_rotation(np.random.default_rng(0)), np.array([0, 0, 700.0])),
    )
    crop = crop_and_resize(view, 64)
    return crop.image, crop.mask


class TestAugment:
    def test_identity_config_is_noop(self, sample):
        img, mask = sample
        out = augment(img, AugmentConfig.identity(), np.random.default_rng(1), mask=mask)
        assert np.array_equal(out, img)

    def test_output_in_unit_range(self, sample):
        img, mask = sample
        cfg = AugmentConfig()
        rng = np.random.default_rng(2)
        small = img[::4, ::4]
        small_mask = mask[::4, ::4]
        for _ in range(10_000):
            out = augment(small, cfg, rng, mask=small_mask)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_blur_preserves_mean(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        cfg = AugmentConfig(
            blur_sigma_range=(1.2, 1.2),
            scale_range=(1.0, 1.0),
            translation_range=(0.0, 0.0),
            color_prob=0.0,
            background_source="none",
        )
        out = augment(img, cfg, np.random.default_rng(4))
        assert abs(out.mean() - img.mean()) < 1e-3

    def test_deterministic_given_seed(self, sample):
        img, mask = sample
        cfg = AugmentConfig()
        a = augment(img, cfg, np.random.default_rng(5), mask=mask)
        b = augment(img, cfg, np.random.default_rng(5), mask=mask)
        assert np.array_equal(a, b)

    def test_input_not_mutated(self, sample):
        img, mask = sample
        ref = img.copy()
        augment(img, AugmentConfig(), np.random.default_rng(6), mask=mask)
        assert np.array_equal(img, ref)

    def test_background_requires_mask(self, sample):
        img, _ = sample
        with pytest.raises(ValueError):
            augment(img, AugmentConfig(background_source="procedural"), np.random.default_rng(7))

    def test_geometric_moves_object_over_background(self, sample):
        img, mask = sample
        cfg = AugmentConfig(
            scale_range=(1.0, 1.0),
            translation_range=(0.15, 0.15),  # forced shift
            color_prob=0.0,
            blur_sigma_range=(0.0, 0.0),
            background_source="none",
        )
        out = augment(img, cfg, np.random.default_rng(8), mask=mask)
        rows0, cols0 = np.nonzero(mask)
        moved = (np.abs(out - img).sum(axis=2) > 1e-6) | mask
        rows1, cols1 = np.nonzero(out.sum(axis=2) > 1e-6)
        # object centroid moved by ~0.15 * 64 ~ 9.6 px in both axes
        assert cols1.mean() - cols0.mean() > 5
        assert rows1.mean() - rows0.mean() > 5


class TestRandomBackground:
    def test_none_is_black(self):
        bg = random_background((16, 16), "none", np.random.default_rng(0))
        assert bg.shape == (16, 16, 3)
        assert (bg == 0).all()

    def test_procedural_deterministic(self):
        a = random_background((32, 32), "procedural", np.random.default_rng(9))
        b = random_background((32, 32), "procedural", np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_procedural_histogram_coverage(self):
        rng = np.random.default_rng(10)
        counts = np.zeros(16)
        for _ in range(1000):
            bg = random_background((16, 16), "procedural", rng)
            hist, _ = np.histogram(bg, bins=16, range=(0, 1))
            counts += hist
        assert (counts > 0).sum() >= 0.9 * 16

    def test_image_dir(self, tmp_path):
        rng = np.random.default_rng(11)
        img = rng.uniform(0, 1, (40, 50, 3))
        save_png(str(tmp_path / "bg0.png"), img)
        bg = random_background((24, 24), "image_dir", rng, image_dir=str(tmp_path))
        assert bg.shape == (24, 24, 3)
        assert bg.min() >= 0 and bg.max() <= 1

    def test_empty_dir_raises(self, tmp_path):
        with pytest.raises(ValueError):
            random_background((8, 8), "image_dir", np.random.default_rng(12), image_dir=str(tmp_path))


class TestAugmentConfig:
    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            AugmentConfig(color_prob=1.5)

    def test_rejects_bad_source(self):
        with pytest.raises(ValueError):
            AugmentConfig(background_source="voc")

    def test_paper_defaults(self):
        cfg = AugmentConfig()
        assert cfg.add_range == (-0.1, 0.1)
        assert cfg.contrast_range == (0.4, 2.3)
        assert cfg.multiply_range == (0.6, 1.4)
        assert cfg.blur_sigma_range == (0.0, 1.2)
        assert cfg.scale_range == (0.8, 1.2)
        assert cfg.translation_range == (-0.15, 0.15)
        assert cfg.color_prob == 0.5
        assert cfg.per_channel_prob == 0.3
