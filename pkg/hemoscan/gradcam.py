"""
Grad-CAM heatmaps for the six slice-encoder outputs, PNG overlays, and the
center-of-mass localization check used against planted lesion boxes.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ShapeError, ValidationError
from .preprocessing import resize_bilinear
from .scan_io import CLASS_NAMES, N_CLASSES
from .slice_encoder import trunk
from .tensor_core import (
    Tape,
    Tensor,
    add,
    backward,
    global_avg_pool,
    matmul,
    slice_axis,
    sum_all,
    transpose,
)

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

OVERLAY_ALPHA = 0.4
COLD = np.array([0.0, 0.0, 255.0])  # heat 0
HOT = np.array([255.0, 0.0, 0.0])  # heat 1
BOX_DILATION = 8
SUBTYPES = tuple(range(1, N_CLASSES))


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    class_index: int
    source: str = ""
    is_zero: bool = False

    @property
    def class_name(self):
        return CLASS_NAMES[self.class_index]


def _check_class(class_index):
    if not isinstance(class_index, (int, np.integer)) or not 0 <= class_index < N_CLASSES:
        raise ValidationError(f"class index must be 0..{N_CLASSES - 1}, got {class_index!r}")
    return int(class_index)


def _detached_logits(model, activations):
    """Classifier head on fixed weights, so backward reaches only the activations"""
    weight = Tensor(model.params["head.weight"].data)
    bias = Tensor(model.params["head.bias"].data)
    return add(matmul(global_avg_pool(activations), transpose(weight)), bias)


def _normalized_map(cam, side, class_index, source):
    cam = np.maximum(cam, 0.0)
    if not cam.max() > 0.0:
        logger.warning(f"{source or 'slice'}: Grad-CAM map for {CLASS_NAMES[class_index]} is all zero")
        return Heatmap(np.zeros((side, side)), class_index, source, is_zero=True)
    up = np.maximum(resize_bilinear(cam, side), 0.0)
    return Heatmap(up / up.max(), class_index, source)


def grad_cam(model, image, class_index, source=""):
    """
    Heatmap for one output of the encoder on one normalized (3, S, S) image.
    Channel weights are the spatial mean of d(logit)/d(activation) over the last
    stage's maps; the weighted sum is rectified, upsampled and max-normalized.
    """
    class_index = _check_class(class_index)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError("grad_cam", image.shape, detail="expected one (3, S, S) image")
    return cam_from_activations(model, trunk(model, image[None]).data[0], class_index, source)


def cam_from_activations(model, fmap, class_index, source=""):
    """Grad-CAM on precomputed last-stage maps (D, s, s)"""
    class_index = _check_class(class_index)
    fmap = np.asarray(fmap, dtype=np.float64)
    activations = Tensor(fmap[None], requires_grad=True)
    with Tape() as tape:
        logit = sum_all(slice_axis(_detached_logits(model, activations), 1, class_index, class_index + 1))
    backward(tape, logit)
    weights = activations.grad[0].mean(axis=(1, 2))
    cam = np.tensordot(weights, fmap, axes=1)
    return _normalized_map(cam, model.config.input_side, class_index, source)


def grad_cam_any(model, image, source=""):
    """Pixelwise max over the five subtype maps, reported under the 'any' class"""
    maps = [grad_cam(model, image, t, source) for t in SUBTYPES]
    values = np.max([m.values for m in maps], axis=0)
    return Heatmap(values, 0, source, is_zero=all(m.is_zero for m in maps))


# ============================================================================
# OVERLAY
# ============================================================================

def overlay(heatmap, base):
    """
    Blend a heatmap over a grayscale base in [0, 1] (the brain-window channel):
    60% gray, 40% of a linear blue-to-red colormap. Returns (H, W, 3) uint8.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if base.shape != values.shape or base.ndim != 2:
        raise ShapeError("overlay", values.shape, base.shape, detail="heatmap and base image must match")
    heat = np.clip(values, 0.0, 1.0)[..., None]
    color = (1.0 - heat) * COLD + heat * HOT
    gray = np.repeat(np.clip(base, 0.0, 1.0)[..., None] * 255.0, 3, axis=-1)
    rgb = (1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * color
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def save_png(path, rgb):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path, format="PNG")
    return path


def overlay_name(scan_id, slice_index, class_index):
    return f"{scan_id}_{slice_index}_{CLASS_NAMES[class_index]}.png"


# ============================================================================
# LOCALIZATION
# ============================================================================

def center_of_mass(heatmap):
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError("center_of_mass", values.shape, detail="expected a 2-D map")
    if not values.sum() > 0.0:
        raise ValidationError("center of mass is undefined for an all-zero heatmap")
    row, col = ndimage.center_of_mass(values / values.sum())
    return float(row), float(col)


def localization_hit(heatmap, box, slice_side, dilation=BOX_DILATION):
    """
    True when the heatmap's center of mass, mapped back to slice pixels, lies in
    the lesion box grown by `dilation` pixels on every side.
    """
    row, col = center_of_mass(heatmap)
    scale = slice_side / heatmap.values.shape[0]
    row, col = (row + 0.5) * scale - 0.5, (col + 0.5) * scale - 0.5
    return (box.row0 - dilation <= row <= box.row1 + dilation
            and box.col0 - dilation <= col <= box.col1 + dilation)
