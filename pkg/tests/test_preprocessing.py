import numpy as np
import pytest

from hemoscan.errors import ShapeError, ValidationError
from hemoscan.preprocessing import (
    BRAIN_WINDOW,
    AugmentationConfig,
    NormalizationStats,
    WindowSpec,
    apply_window,
    augment,
    compose_windows,
    normalize,
    prepare_volume,
    resize_bilinear,
)


@pytest.mark.parametrize("hu, expected", [(40, 0.5), (0, 0.0), (60, 0.75), (500, 1.0)])
def test_brain_window_values(hu, expected):
    assert apply_window(hu, WindowSpec(40, 80)) == expected


def test_window_width_must_be_positive():
    with pytest.raises(ValidationError):
        WindowSpec(40, 0)


def test_window_is_monotone(rng):
    hu = np.sort(rng.uniform(-1200, 1200, 500))
    assert np.all(np.diff(apply_window(hu, BRAIN_WINDOW)) >= 0)


def test_compose_zero_slice():
    image = compose_windows(np.zeros((8, 8)))
    assert image.shape == (3, 8, 8)
    assert np.all(image[0] == 0.0)
    assert np.all(image[1] == 0.1)
    # (0 - (40 - 190)) / 380
    np.testing.assert_array_equal(image[2], np.full((8, 8), 150.0 / 380.0))


def test_compose_midpoint_and_bone():
    assert np.all(compose_windows(np.full((8, 8), 40))[0] == 0.5)
    assert np.all(compose_windows(np.full((8, 8), 1000)) == 1.0)


def test_compose_channels_stay_in_unit_interval(rng):
    image = compose_windows(rng.integers(-32768, 32767, size=(16, 16)))
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_compose_rejects_tiny_slice():
    with pytest.raises(ShapeError):
        compose_windows(np.zeros((4, 4)))


def test_resize_constant_image():
    out = resize_bilinear(np.full((3, 10, 10), 0.3), 16)
    assert out.shape == (3, 16, 16)
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


def test_resize_half_pixel_convention():
    out = resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 4)
    for row in out:
        np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0], atol=1e-12)


def test_resize_to_eight_from_two():
    out = resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 8)
    np.testing.assert_allclose(out[0], [0, 0, 0.125, 0.375, 0.625, 0.875, 1, 1], atol=1e-12)


def test_resize_same_size_is_exact_copy(rng):
    img = rng.uniform(size=(3, 12, 12))
    out = resize_bilinear(img, 12)
    np.testing.assert_array_equal(out, img)
    assert out is not img


def test_resize_preserves_value_range(rng):
    img = rng.uniform(-2, 5, size=(20, 20))
    out = resize_bilinear(img, 33)
    assert out.min() >= img.min() and out.max() <= img.max()


def test_normalize_mean_image_is_zero():
    stats = NormalizationStats()
    img = np.broadcast_to(np.array(stats.mean)[:, None, None], (3, 4, 4))
    np.testing.assert_allclose(normalize(img, stats), 0.0, atol=1e-15)


def test_normalize_identity_stats(rng):
    img = rng.uniform(size=(3, 5, 5))
    np.testing.assert_array_equal(normalize(img, NormalizationStats((0, 0, 0), (1, 1, 1))), img)


def test_normalize_default_brain_channel_value():
    out = normalize(np.full((3, 2, 2), 0.5))
    assert out[0, 0, 0] == pytest.approx((0.5 - 0.1738) / 0.3161)
    assert out[0, 0, 0] == pytest.approx(1.0320, abs=1e-4)


def test_normalization_std_must_be_positive():
    with pytest.raises(ValidationError):
        NormalizationStats(std=(0.3, 0.0, 0.3))


def test_augment_identity_config_is_exact(rng):
    img = rng.uniform(size=(3, 16, 16))
    np.testing.assert_array_equal(augment(img, AugmentationConfig.identity(), rng), img)


def test_flip_is_an_involution(rng):
    cfg = AugmentationConfig(flip_prob=1.0, shift_prob=0, rotation_prob=0, scale_prob=0, brightness_prob=0)
    img = rng.uniform(size=(3, 16, 16))
    once = augment(img, cfg, rng)
    np.testing.assert_array_equal(once, img[:, :, ::-1])
    np.testing.assert_array_equal(augment(once, cfg, rng), img)


def test_brightness_shift_on_constant_image(rng):
    cfg = AugmentationConfig(
        flip_prob=0, shift_prob=0, rotation_prob=0, scale_prob=0, brightness_prob=1.0, brightness=(0.1, 0.1)
    )
    out = augment(np.full((3, 8, 8), 0.3), cfg, rng)
    np.testing.assert_allclose(out, 0.4, atol=1e-12)


def test_geometric_augmentation_keeps_dims_and_fills_zero(rng):
    cfg = AugmentationConfig(flip_prob=0, shift_prob=1, rotation_prob=1, scale_prob=1, brightness_prob=0,
                             shift=(0.25, 0.25), rotation=(30, 30), scale=(0.8, 0.8))
    out = augment(np.ones((3, 16, 16)), cfg, rng)
    assert out.shape == (3, 16, 16)
    assert out.min() == 0.0
    assert out.max() <= 1.0 + 1e-12


def test_augment_is_reproducible_from_seed():
    img = np.random.default_rng(3).uniform(size=(3, 16, 16))
    cfg = AugmentationConfig()
    first = augment(img, cfg, np.random.default_rng(11))
    second = augment(img, cfg, np.random.default_rng(11))
    np.testing.assert_array_equal(first, second)


def test_augmentation_probability_out_of_range():
    with pytest.raises(ValidationError, match="flip_prob"):
        AugmentationConfig(flip_prob=1.5)


def test_prepare_volume_shape_and_range(rng):
    volume = rng.integers(-1000, 1000, size=(3, 20, 20))
    images = prepare_volume(volume, 16)
    assert images.shape == (3, 3, 16, 16)
    assert images.dtype == np.float32
    assert images.min() >= 0.0 and images.max() <= 1.0
