import numpy as np
import pytest

from dmlcsr.config import CLASS_NAMES, ConfigError, SceneConfig
from dmlcsr.data import (
    LabeledSample,
    apply_affine,
    augment,
    augment_params,
    build_splits,
    generate_sample,
    inject_label_noise,
)
from oracles import band_pixels_loop


def test_generate_is_deterministic():
    a = generate_sample(7)
    b = generate_sample(7)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert generate_sample(8).labels.tobytes() != a.labels.tobytes()


def test_generate_ranges():
    s = generate_sample(7)
    assert s.image.shape == (3, 96, 96) and s.image.dtype == np.float32
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert s.labels.max() < 11 and s.labels.min() == 0


def test_every_class_present_and_skin_dominates_inner_mouth():
    counts = np.zeros(len(CLASS_NAMES))
    present = np.zeros(len(CLASS_NAMES))
    for seed in range(100):
        c = np.bincount(generate_sample(seed).labels.ravel(), minlength=len(CLASS_NAMES))
        counts += c
        present += c > 0
    assert (present / 100 >= 0.99).all()
    assert counts[CLASS_NAMES.index("skin")] > counts[CLASS_NAMES.index("inner_mouth")]


@pytest.mark.parametrize("kwargs", [dict(image_size=40), dict(image_size=16), dict(num_classes=3),
                                    dict(shape_jitter=0.9)])
def test_invalid_scene_config(kwargs):
    with pytest.raises(ConfigError):
        generate_sample(0, SceneConfig(**kwargs))


def test_noise_zero_rate_identity():
    labels = generate_sample(1).labels
    assert np.array_equal(inject_label_noise(labels, 0.0, 5), labels)


def test_noise_full_rate_flips_whole_band_on_two_regions():
    labels = np.zeros((16, 16), dtype=np.uint8)
    labels[:, 7:] = 4
    labels[3:6, 2:5] = 4  # a second boundary inside region A
    noisy = inject_label_noise(labels, 1.0, 0)
    band = band_pixels_loop(labels)
    assert np.array_equal(noisy[band], np.where(labels[band] == 0, 4, 0))
    assert np.array_equal(noisy[~band], labels[~band])


def test_noise_touches_band_only_and_is_seeded():
    labels = generate_sample(2).labels
    band = band_pixels_loop(labels)
    a = inject_label_noise(labels, 0.2, 1)
    b = inject_label_noise(labels, 0.2, 2)
    assert np.array_equal(a, inject_label_noise(labels, 0.2, 1))
    assert (a != b).sum() > 0
    changed = a != labels
    assert not changed[~band].any()
    assert abs(changed.sum() / band.sum() - 0.2) < 0.02


def test_noise_keeps_label_set_local():
    labels = generate_sample(4).labels
    noisy = inject_label_noise(labels, 0.5, 0)
    # every new label is one that occurs within city-block distance 2
    ys, xs = np.nonzero(noisy != labels)
    for y, x in zip(ys, xs):
        window = labels[max(0, y - 2):y + 3, max(0, x - 2):x + 3]
        assert noisy[y, x] in window


def test_augment_identity():
    s = generate_sample(3)
    out = apply_affine(s, 0.0, 1.0)
    assert np.array_equal(out.image, s.image) and np.array_equal(out.labels, s.labels)


def test_augment_params_ranges():
    params = np.array([augment_params(seed) for seed in range(500)])
    assert (np.abs(params[:, 0]) < 30).all()
    assert (params[:, 1] >= 0.75).all() and (params[:, 1] <= 1.25).all()


def test_augment_preserves_label_set_and_shape():
    s = generate_sample(5)
    for seed in range(20):
        out = augment(s, seed)
        assert out.labels.shape == s.labels.shape == out.image.shape[1:]
        assert set(np.unique(out.labels)) <= set(np.unique(s.labels))
        assert out.labels.max() < 11
    assert np.array_equal(augment(s, 3).labels, augment(s, 3).labels)


def test_rotated_scaled_disk_area():
    size = 96
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    disk = (yy - c) ** 2 + (xx - c) ** 2 <= 15 ** 2
    labels = np.where(disk, 3, 0).astype(np.uint8)
    image = np.zeros((3, size, size), np.float32)
    out = apply_affine(LabeledSample(image, labels), 30.0, 1.25)
    expected = 1.25 ** 2 * disk.sum()
    assert abs((out.labels == 3).sum() - expected) / expected < 0.10


def test_padding_is_background_and_black():
    s = generate_sample(6)
    s.labels[:] = 5
    s.image[:] = 1.0
    out = apply_affine(s, 30.0, 0.75)
    assert out.labels[0, 0] == 0 and out.image[:, 0, 0].max() == 0.0


def test_build_splits_noise_only_on_train():
    d = build_splits(4, 3, 0.2, seed=1)
    assert d.train_images.shape == (4, 3, 96, 96) and d.val_labels.shape == (3, 96, 96)
    assert (d.train_labels != d.clean_train_labels).any()
    # validation labels are the generator's clean output
    assert not np.array_equal(d.val_images[0], d.train_images[0])
