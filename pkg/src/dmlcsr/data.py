"""Synthetic face-layout corpus, boundary label noise and geometric augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import ConfigError, SceneConfig


@dataclass
class LabeledSample:
    image: np.ndarray  # float32, 3 x H x W, values in [0, 1]
    labels: np.ndarray  # uint8, H x W

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3xHxW, got {self.image.shape}")
        if self.image.shape[1:] != self.labels.shape:
            raise ValueError("image and labels must share spatial dimensions")


def check_label_map(labels: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"label map must be integer typed, got {labels.dtype}")
    if labels.size and labels.min() < 0:
        raise ValueError("label map contains negative entries")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {num_classes} classes")
    return labels


# --- generation --------------------------------------------------------------

def _ellipse(u, v, cu, cv, au, av, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    du, dv = u - cu, v - cv
    x = c * du + s * dv
    y = -s * du + c * dv
    return (x / au) ** 2 + (y / av) ** 2 <= 1.0


def generate_sample(seed: int, config: SceneConfig | None = None) -> LabeledSample:
    """Render one face-like layout; a pure function of ``(seed, config)``."""
    config = config or SceneConfig()
    config.validate()
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    size = config.image_size
    j = config.shape_jitter

    def jit(scale=1.0):
        return 1.0 + j * scale * rng.uniform(-1.0, 1.0)

    # face frame: unit = image size, origin = face centre, rotated by a small roll
    cx = 0.5 + 0.04 * rng.uniform(-1, 1)
    cy = 0.5 + 0.04 * rng.uniform(-1, 1)
    roll = np.deg2rad(10.0) * rng.uniform(-1, 1)
    face_scale = jit(0.8)
    ys, xs = (np.mgrid[0:size, 0:size] + 0.5) / size
    c, s = np.cos(roll), np.sin(roll)
    u = (c * (xs - cx) + s * (ys - cy)) / face_scale
    v = (-s * (xs - cx) + c * (ys - cy)) / face_scale

    labels = np.zeros((size, size), dtype=np.uint8)
    hair = _ellipse(u, v, 0.0, -0.06 * jit(), 0.35 * jit(0.5), 0.40 * jit(0.5)) & (v < 0.10 * jit())
    labels[hair] = 10
    labels[_ellipse(u, v, 0.0, 0.03, 0.26 * jit(0.5), 0.33 * jit(0.5))] = 1

    eye_dx = 0.105 * jit(0.5)
    brow_dy = -0.115 * jit(0.5)
    eye_dy = -0.035 * jit(0.5)
    for side, (brow_cls, eye_cls) in zip((-1, 1), ((2, 4), (3, 5))):
        tilt = side * np.deg2rad(8.0) * rng.uniform(-1, 1)
        labels[_ellipse(u, v, side * eye_dx, brow_dy, 0.068 * jit(), 0.020 * jit(0.5), tilt)] = brow_cls
        labels[_ellipse(u, v, side * eye_dx, eye_dy, 0.052 * jit(), 0.026 * jit(0.5), tilt)] = eye_cls

    labels[_ellipse(u, v, 0.0, 0.07 * jit(0.3), 0.036 * jit(), 0.070 * jit(0.5))] = 6

    my = 0.195 * jit(0.3)
    mouth = _ellipse(u, v, 0.0, my, 0.105 * jit(), 0.048 * jit(0.5))
    labels[mouth & (v < my)] = 7
    labels[mouth & (v >= my)] = 9
    opening = 0.014 * (1.0 + rng.uniform(0.0, 1.5))
    labels[_ellipse(u, v, 0.0, my, 0.082 * jit(), opening)] = 8

    palette = np.asarray(config.palette, dtype=np.float64)
    colors = palette + config.color_jitter * rng.uniform(-1, 1, size=palette.shape)
    # hair and background colours vary a lot between subjects
    colors[10] = palette[10] * rng.uniform(0.5, 2.2) + config.color_jitter * rng.uniform(-1, 1, 3)
    colors[0] = rng.uniform(0.1, 0.9, 3)
    image = colors[labels].transpose(2, 0, 1)
    shade = 1.0 + 0.12 * rng.uniform(-1, 1) * (xs - 0.5) + 0.12 * rng.uniform(-1, 1) * (ys - 0.5)
    image = image * shade[None]
    image = image + config.texture_noise_sigma * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledSample(image=image, labels=labels)


def generate_dataset(seeds, config: SceneConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples for ``seeds`` into (n, 3, H, W) images and (n, H, W) labels."""
    samples = [generate_sample(int(s), config) for s in seeds]
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples])
    return images, labels


# --- label noise ---------------------------------------------------------------

# city-block radius 2, nearest first; the first differing label wins
_BAND_OFFSETS = (
    (-1, 0), (1, 0), (0, -1), (0, 1),
    (-2, 0), (2, 0), (0, -2), (0, 2),
    (-1, -1), (-1, 1), (1, -1), (1, 1),
)


def _shift(arr: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """out[y, x] = arr[y + dy, x + dx], ``fill`` outside the raster."""
    h, w = arr.shape
    out = np.full_like(arr, fill)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yt = slice(max(0, dy), min(h, h + dy))
    xt = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = arr[yt, xt]
    return out


def neighbour_labels(labels: np.ndarray) -> np.ndarray:
    """For every pixel, the label of the nearest differing pixel within
    city-block distance 2, or -1 when the pixel is outside the boundary band."""
    lab = labels.astype(np.int64)
    alt = np.full(lab.shape, -1, dtype=np.int64)
    for dy, dx in _BAND_OFFSETS:
        other = _shift(lab, dy, dx, -1)
        take = (alt < 0) & (other >= 0) & (other != lab)
        alt[take] = other[take]
    return alt


def inject_label_noise(labels: np.ndarray, rate: float, seed: int) -> np.ndarray:
    """Reassign about ``rate`` of the boundary-band pixels to an adjacent class.

    The corrupted pixels are chosen as the top quantile of a smoothed random
    field restricted to the band, so errors come in small coherent patches like
    annotation slips rather than isolated salt-and-pepper flips.
    """
    labels = check_label_map(labels)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    out = labels.copy()
    if rate == 0.0:
        return out
    alt = neighbour_labels(labels)
    band = np.flatnonzero(alt >= 0)
    n_flip = int(round(rate * band.size))
    if n_flip == 0:
        return out
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.standard_normal(labels.shape), sigma=1.5)
    order = np.argsort(-field.ravel()[band], kind="stable")
    chosen = band[order[:n_flip]]
    out.ravel()[chosen] = alt.ravel()[chosen].astype(labels.dtype)
    return out


# --- augmentation --------------------------------------------------------------

def augment_params(seed: int) -> tuple[float, float]:
    """Rotation angle in degrees from (-30, 30) and scale from [0.75, 1.25]."""
    rng = np.random.default_rng(seed)
    return float(rng.uniform(-30.0, 30.0)), float(rng.uniform(0.75, 1.25))


def warp(arr: np.ndarray, angle: float, scale: float, order: int, cval=0.0) -> np.ndarray:
    """Rotate by ``angle`` degrees and zoom by ``scale`` about the raster centre.

    ``arr`` is H x W or C x H x W; ``cval`` may be a per-channel sequence.
    """
    if angle == 0.0 and scale == 1.0:
        return arr.copy()
    theta = np.deg2rad(angle)
    c, s = np.cos(theta), np.sin(theta)
    inv = np.array([[c, -s], [s, c]]) / scale  # output -> input
    spatial = arr.shape[-2:]
    centre = (np.asarray(spatial, dtype=np.float64) - 1.0) / 2.0
    offset = centre - inv @ centre
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, inv, offset=offset, order=order,
                                        mode="grid-constant", cval=float(cval))
    cvals = np.broadcast_to(np.asarray(cval, dtype=np.float64), (arr.shape[0],))
    return np.stack([
        ndimage.affine_transform(ch, inv, offset=offset, order=order,
                                 mode="grid-constant", cval=float(cv))
        for ch, cv in zip(arr, cvals)
    ])


def apply_affine(sample: LabeledSample, angle: float, scale: float) -> LabeledSample:
    image = np.clip(warp(sample.image, angle, scale, order=1, cval=0.0), 0.0, 1.0)
    labels = warp(sample.labels, angle, scale, order=0, cval=0)
    return LabeledSample(image=image.astype(np.float32), labels=labels.astype(sample.labels.dtype))


def augment(sample: LabeledSample, seed: int) -> LabeledSample:
    """Random rotation and isotropic scaling; labels warp nearest-neighbour and
    pad with background, the image warps bilinearly and pads with zeros."""
    angle, scale = augment_params(seed)
    return apply_affine(sample, angle, scale)


@dataclass
class SplitData:
    train_images: np.ndarray
    train_labels: np.ndarray  # noisy
    clean_train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray  # clean


def build_splits(n_train: int, n_val: int, noise_rate: float, seed: int = 0,
                 config: SceneConfig | None = None) -> SplitData:
    """Disjoint train/val corpora; label noise touches the training labels only."""
    base = 1_000_003 * seed
    train_seeds = [base + i for i in range(n_train)]
    val_seeds = [base + 500_000 + i for i in range(n_val)]
    tx, ty = generate_dataset(train_seeds, config)
    vx, vy = generate_dataset(val_seeds, config)
    noisy = np.stack([inject_label_noise(lab, noise_rate, s) for lab, s in zip(ty, train_seeds)])
    return SplitData(tx, noisy, ty, vx, vy)
