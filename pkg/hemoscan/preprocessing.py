"""
Slice preprocessing
HU windowing into a 3-channel image, bilinear resizing, per-channel
normalization and training-time augmentation.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ValidationError

# ============================================================================
# WINDOWS AND NORMALIZATION CONSTANTS
# ============================================================================

MIN_SLICE_SIDE = 8


@dataclass(frozen=True)
class WindowSpec:
    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValidationError(f"window width must be positive, got {self.width}")

    @property
    def lower(self):
        return self.center - self.width / 2.0


BRAIN_WINDOW = WindowSpec(40, 80)
SUBDURAL_WINDOW = WindowSpec(80, 200)
SOFT_TISSUE_WINDOW = WindowSpec(40, 380)
WINDOWS = (BRAIN_WINDOW, SUBDURAL_WINDOW, SOFT_TISSUE_WINDOW)  # channel order


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple = (0.1738, 0.1433, 0.1970)
    std: tuple = (0.3161, 0.2850, 0.3111)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValidationError("normalization stats need exactly 3 means and 3 stds")
        if any(not s > 0 for s in self.std):
            raise ValidationError(f"normalization std must be positive, got {self.std}")


DEFAULT_STATS = NormalizationStats()


@dataclass(frozen=True)
class AugmentationConfig:
    """
    Per-transform application probabilities and sampling ranges. Ranges are
    (low, high) pairs: rotation in degrees, shift as a fraction of the side,
    scale as a factor, brightness as an additive delta on the [0, 1] image.
    """

    flip_prob: float = 0.5
    shift_prob: float = 0.5
    rotation_prob: float = 0.5
    scale_prob: float = 0.5
    brightness_prob: float = 0.5
    rotation: tuple = (-15.0, 15.0)
    shift: tuple = (-0.1, 0.1)
    scale: tuple = (0.9, 1.1)
    brightness: tuple = (-0.1, 0.1)

    def __post_init__(self):
        for name in ("flip_prob", "shift_prob", "rotation_prob", "scale_prob", "brightness_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"augmentation {name} must be in [0, 1], got {value}")
        for name in ("rotation", "shift", "scale", "brightness"):
            low, high = getattr(self, name)
            if low > high:
                raise ValidationError(f"augmentation {name} range is reversed: ({low}, {high})")
        if self.scale[0] <= 0:
            raise ValidationError(f"augmentation scale must stay positive, got {self.scale}")

    @classmethod
    def symmetric(cls, prob=0.5, flip_prob=0.5, rotation=15.0, shift=0.1, scale=(0.9, 1.1), brightness=0.1):
        """Every non-flip transform shares one probability; ranges centred on the identity"""
        return cls(
            flip_prob=flip_prob,
            shift_prob=prob,
            rotation_prob=prob,
            scale_prob=prob,
            brightness_prob=prob,
            rotation=(-rotation, rotation),
            shift=(-shift, shift),
            scale=tuple(scale),
            brightness=(-brightness, brightness),
        )

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


# ============================================================================
# WINDOWING
# ============================================================================

def apply_window(hu, window):
    """Clamped linear map of HU onto [0, 1] through one window"""
    hu = np.asarray(hu, dtype=np.float64)
    return np.clip((hu - window.lower) / window.width, 0.0, 1.0)


def compose_windows(hu_slice):
    """(H, W) HU slice -> (3, H, W) image, channels brain / subdural / soft tissue"""
    hu_slice = np.asarray(hu_slice)
    if hu_slice.ndim != 2 or min(hu_slice.shape) < MIN_SLICE_SIDE:
        raise ShapeError("compose_windows", hu_slice.shape, detail=f"expected a 2-D slice with sides >= {MIN_SLICE_SIDE}")
    return np.stack([apply_window(hu_slice, window) for window in WINDOWS])


# ============================================================================
# RESAMPLING AND NORMALIZATION
# ============================================================================

def resize_bilinear(img, target):
    """
    Resize the last two axes to target x target with bilinear weights on
    half-pixel centers (align-corners false); edges replicate.
    """
    img = np.asarray(img, dtype=np.float64)
    if target < 1:
        raise ValidationError(f"resize target must be positive, got {target}")
    if img.ndim not in (2, 3):
        raise ShapeError("resize_bilinear", img.shape, detail="expected (H, W) or (C, H, W)")
    h, w = img.shape[-2:]
    if (h, w) == (target, target):
        return img.copy()
    factors = (1.0,) * (img.ndim - 2) + (target / h, target / w)
    return ndimage.zoom(img, factors, order=1, mode="nearest", grid_mode=True)


def normalize(img, stats=DEFAULT_STATS):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError("normalize", img.shape, detail="expected a 3-channel image")
    mean = np.asarray(stats.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float64)[:, None, None]
    return (img - mean) / std


# ============================================================================
# AUGMENTATION
# ============================================================================

def _affine_inverse(side_h, side_w, angle_deg, scale, shift_rows, shift_cols):
    """Output->input mapping of a rotation/scale about the image center followed by a shift"""
    theta = math.radians(angle_deg)
    forward = scale * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    inverse = np.linalg.inv(forward)
    center = np.array([(side_h - 1) / 2.0, (side_w - 1) / 2.0])
    shift = np.array([shift_rows, shift_cols])
    return inverse, center - inverse @ (center + shift)


def augment(img, cfg, rng):
    """
    Randomly flip, shift, rotate, scale and brighten a windowed (C, H, W) image.
    Decisions are drawn in that order, one uniform per transform, then one
    magnitude for each applied transform; geometric changes are resampled
    once, bilinearly, with zero fill.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError("augment", img.shape, detail="expected (C, H, W)")
    _, h, w = img.shape

    do_flip = rng.random() < cfg.flip_prob
    do_shift = rng.random() < cfg.shift_prob
    do_rotate = rng.random() < cfg.rotation_prob
    do_scale = rng.random() < cfg.scale_prob
    do_brightness = rng.random() < cfg.brightness_prob

    out = img[:, :, ::-1].copy() if do_flip else img.copy()

    shift_rows = shift_cols = 0.0
    angle, factor = 0.0, 1.0
    if do_shift:
        shift_rows = rng.uniform(*cfg.shift) * h
        shift_cols = rng.uniform(*cfg.shift) * w
    if do_rotate:
        angle = rng.uniform(*cfg.rotation)
    if do_scale:
        factor = rng.uniform(*cfg.scale)
    if do_shift or do_rotate or do_scale:
        matrix, offset = _affine_inverse(h, w, angle, factor, shift_rows, shift_cols)
        out = np.stack([
            ndimage.affine_transform(channel, matrix, offset=offset, order=1, mode="constant", cval=0.0)
            for channel in out
        ])

    if do_brightness:
        out = np.clip(out + rng.uniform(*cfg.brightness), 0.0, 1.0)
    return out


# ============================================================================
# VOLUMES
# ============================================================================

def prepare_slice(hu_slice, input_side):
    """HU slice -> windowed (3, side, side) image in [0, 1], not yet normalized"""
    return resize_bilinear(compose_windows(hu_slice), input_side)


def prepare_volume(volume, input_side):
    """(N, H, W) HU volume -> (N, 3, side, side) float32 windowed images"""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeError("prepare_volume", volume.shape, detail="expected (slices, height, width)")
    return np.stack([prepare_slice(s, input_side) for s in volume]).astype(np.float32)
