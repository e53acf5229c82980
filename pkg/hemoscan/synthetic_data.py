"""
Synthetic CT phantoms
Circular skull ring around uniform brain tissue, with hyperdense lesions whose
shape and position stand in for the five hemorrhage subtypes. The geometry is a
proxy vocabulary that makes the multi-label task learnable and gives Grad-CAM a
known target; it is not meant to look like real anatomy.

    epidural          lens pressed against the inner skull
    intraparenchymal  round blob deep in the parenchyma
    intraventricular  round blob at the center
    subarachnoid      thin rim segment along the inner skull
    subdural          crescent along the inner skull, tapered at both ends
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .scan_io import CLASS_NAMES, N_CLASSES, LabelSidecar, LesionBox, write_ctv, write_json, write_sidecar

logger = logging.getLogger(__name__)

# ============================================================================
# CONFIGURATION
# ============================================================================

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
HU_RANGE = (-1024, 3071)

# Head outline, as fractions of the slice side
OUTER_RADIUS = 0.46
SKULL_THICKNESS = 0.06
MIN_EXTENT = 2.5  # pixels; keeps the smallest cross-sections visible

# Per-subtype size parameters, as fractions of the slice side
LESION_GEOMETRY = {
    "epidural": {"thickness": 0.07, "length": 0.16},
    "intraparenchymal": {"radius": 0.09, "depth": (0.3, 0.55)},
    "intraventricular": {"radius": 0.08, "jitter": 0.05},
    "subarachnoid": {"thickness": 3.0, "span": (0.35, 0.5)},  # thickness in pixels, span in radians
    "subdural": {"thickness": 0.08, "span": 0.9},
}


@dataclass(frozen=True)
class PhantomConfig:
    slice_side: int = 64
    slices_min: int = 16
    slices_max: int = 24
    air_hu: float = -1000.0
    brain_hu: tuple = (20.0, 45.0)
    skull_hu: float = 900.0
    blood_hu: tuple = (55.0, 95.0)
    noise_sigma: float = 4.0
    positive_prob: float = 0.5
    eph_rarity: float = 5.0  # epidural lesions are this many times rarer than each other subtype
    max_lesions: int = 2

    def __post_init__(self):
        object.__setattr__(self, "brain_hu", tuple(float(v) for v in self.brain_hu))
        object.__setattr__(self, "blood_hu", tuple(float(v) for v in self.blood_hu))
        if self.slice_side < 16:
            raise ValidationError(f"slice side must be at least 16, got {self.slice_side}")
        if not 2 <= self.slices_min <= self.slices_max:
            raise ValidationError(
                f"slice count range must satisfy 2 <= min <= max, got {self.slices_min}..{self.slices_max}"
            )
        if self.brain_hu[0] > self.brain_hu[1] or self.blood_hu[0] > self.blood_hu[1]:
            raise ValidationError("HU ranges must be given as (low, high)")
        if not self.blood_hu[0] > self.brain_hu[1]:
            raise ValidationError(f"lesion HU {self.blood_hu} must lie strictly above brain HU {self.brain_hu}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise sigma must be non-negative, got {self.noise_sigma}")
        if not 0.0 <= self.positive_prob <= 1.0:
            raise ValidationError(f"positive probability must be in [0, 1], got {self.positive_prob}")
        if self.eph_rarity < 1.0:
            raise ValidationError(f"epidural rarity must be at least 1, got {self.eph_rarity}")
        if self.max_lesions < 1:
            raise ValidationError(f"max lesions must be at least 1, got {self.max_lesions}")

    def subtype_probs(self):
        weights = np.array([1.0 / self.eph_rarity, 1.0, 1.0, 1.0, 1.0])
        return weights / weights.sum()


@dataclass
class GeneratedScan:
    volume: np.ndarray  # (N, H, W) int16 HU
    labels: np.ndarray  # (N, 6) uint8
    masks: np.ndarray  # (N, 6, H, W) bool; column 0 is the union
    boxes: list = field(default_factory=list)

    @property
    def n_slices(self):
        return int(self.volume.shape[0])


# ============================================================================
# GEOMETRY
# ============================================================================

def _angle_gap(theta, theta0):
    return np.abs(np.angle(np.exp(1j * (theta - theta0))))


def _local_frame(dy, dx, cy, cx, theta0):
    """Coordinates along (radial) and across (tangential) the direction theta0, about (cy, cx)"""
    ry, rx = dy - cy, dx - cx
    radial = ry * math.sin(theta0) + rx * math.cos(theta0)
    tangential = -ry * math.cos(theta0) + rx * math.sin(theta0)
    return radial, tangential


def _draw_lesion(subtype, rng, side):
    """Per-lesion constants drawn once; the slice profile scales them later"""
    geometry = LESION_GEOMETRY[subtype]
    lesion = {"theta": rng.uniform(-math.pi, math.pi)}
    if subtype == "intraparenchymal":
        lesion["depth"] = rng.uniform(*geometry["depth"])
    elif subtype == "intraventricular":
        jitter = geometry["jitter"] * side
        lesion["offset"] = (rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter))
    elif subtype == "subarachnoid":
        lesion["span"] = rng.uniform(*geometry["span"])
    return lesion


def _lesion_mask(subtype, lesion, grid, r_in, scale, side):
    """Boolean mask of one lesion on one slice, plus an anchor pixel inside the brain"""
    dy, dx, r, theta = grid
    geometry = LESION_GEOMETRY[subtype]
    theta0 = lesion["theta"]
    direction = (math.sin(theta0), math.cos(theta0))

    if subtype == "epidural":
        thickness = max(MIN_EXTENT, geometry["thickness"] * side * scale)
        length = max(2.0, geometry["length"] * side * scale)
        distance = r_in - thickness
        radial, tangential = _local_frame(dy, dx, distance * direction[0], distance * direction[1], theta0)
        mask = (radial / thickness) ** 2 + (tangential / length) ** 2 <= 1.0
        anchor = max(r_in - 2.0, 0.0)
    elif subtype in ("intraparenchymal", "intraventricular"):
        radius = max(MIN_EXTENT, geometry["radius"] * side * scale)
        if subtype == "intraparenchymal":
            distance = lesion["depth"] * r_in
            cy, cx = distance * direction[0], distance * direction[1]
        else:
            cy, cx = lesion["offset"]
        mask = (dy - cy) ** 2 + (dx - cx) ** 2 <= radius ** 2
        anchor = (cy, cx)
    elif subtype == "subarachnoid":
        span = lesion["span"] * (0.5 + 0.5 * scale)
        mask = (_angle_gap(theta, theta0) <= span) & (r >= r_in - geometry["thickness"])
        anchor = max(r_in - 2.0, 0.0)
    else:
        span = geometry["span"]
        gap = _angle_gap(theta, theta0)
        width = max(2.0, geometry["thickness"] * side * scale) * np.cos(0.5 * math.pi * np.minimum(gap / span, 1.0))
        mask = (gap < span) & (r >= r_in - width)
        anchor = max(r_in - 2.0, 0.0)

    if not isinstance(anchor, tuple):
        anchor = (anchor * direction[0], anchor * direction[1])
    return mask & (r < r_in), anchor


def _anchor_pixel(anchor, r, r_in):
    """Pixel nearest to the anchor that lies inside the brain disc"""
    side = r.shape[0]
    center = (side - 1) / 2.0
    row = int(np.clip(round(center + anchor[0]), 0, side - 1))
    col = int(np.clip(round(center + anchor[1]), 0, side - 1))
    if r[row, col] < r_in:
        return row, col
    inside = np.argwhere(r < r_in)
    distance = (inside[:, 0] - center - anchor[0]) ** 2 + (inside[:, 1] - center - anchor[1]) ** 2
    row, col = inside[np.argmin(distance)]
    return int(row), int(col)


def _bounding_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


# ============================================================================
# SCANS
# ============================================================================

def generate_scan(rng, config=PhantomConfig()):
    side = config.slice_side
    n = int(rng.integers(config.slices_min, config.slices_max + 1))
    center = (side - 1) / 2.0
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = rows - center, cols - center
    r, theta = np.hypot(dy, dx), np.arctan2(dy, dx)
    grid = (dy, dx, r, theta)

    outer = OUTER_RADIUS * side * rng.uniform(0.94, 1.0)
    thickness = SKULL_THICKNESS * side
    profile = 0.85 + 0.15 * np.sin(math.pi * (np.arange(n) + 0.5) / n)
    r_outer = outer * profile
    r_inner = r_outer - thickness

    masks = np.zeros((n, N_CLASSES, side, side), dtype=bool)
    boxes = []
    if rng.random() < config.positive_prob:
        count = int(rng.integers(1, config.max_lesions + 1))
        for _ in range(count):
            class_index = 1 + int(rng.choice(N_CLASSES - 1, p=config.subtype_probs()))
            subtype = CLASS_NAMES[class_index]
            length = int(rng.integers(2, max(2, n // 2) + 1))
            start = int(rng.integers(0, n - length + 1))
            lesion = _draw_lesion(subtype, rng, side)
            for j in range(length):
                z = start + j
                scale = 0.4 + 0.6 * math.sin(math.pi * (j + 1) / (length + 1))
                mask, anchor = _lesion_mask(subtype, lesion, grid, r_inner[z], scale, side)
                if not mask.any():
                    mask[_anchor_pixel(anchor, r, r_inner[z])] = True
                masks[z, class_index] |= mask
                boxes.append(LesionBox(z, class_index, *_bounding_box(mask)))
    masks[:, 0] = masks[:, 1:].any(axis=1)

    volume = np.full((n, side, side), config.air_hu)
    for z in range(n):
        brain = r < r_inner[z]
        skull = (r < r_outer[z]) & ~brain
        lesion = masks[z, 0] & brain
        volume[z][skull] = config.skull_hu
        volume[z][brain] = rng.uniform(*config.brain_hu, size=int(brain.sum()))
        volume[z][lesion] = rng.uniform(*config.blood_hu, size=int(lesion.sum()))
    if config.noise_sigma > 0:
        volume += rng.normal(0.0, config.noise_sigma, size=volume.shape)
    volume = np.clip(np.rint(volume), *HU_RANGE).astype(np.int16)

    labels = masks.any(axis=(2, 3)).astype(np.uint8)
    return GeneratedScan(volume=volume, labels=labels, masks=masks, boxes=boxes)


# ============================================================================
# DATASETS
# ============================================================================

@dataclass
class DatasetManifest:
    seed: int
    n_scans: int
    split_fractions: tuple
    splits: dict
    phantom: dict

    def to_json(self):
        return {
            "seed": self.seed,
            "n_scans": self.n_scans,
            "split_fractions": list(self.split_fractions),
            "splits": self.splits,
            "phantom": self.phantom,
        }


def check_fractions(fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions):
        raise ValidationError(f"split fractions must be three non-negative numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must sum to 1, got {sum(fractions):g}")
    return fractions


def split_counts(n_scans, fractions):
    """Rounded train and val counts; test takes the remainder"""
    fractions = check_fractions(fractions)
    n_train = min(n_scans, int(math.floor(n_scans * fractions[0] + 0.5)))
    n_val = min(n_scans - n_train, int(math.floor(n_scans * fractions[1] + 0.5)))
    return n_train, n_val, n_scans - n_train - n_val


def scan_id(index):
    return f"CT{index:05d}"


def scan_paths(data_dir, split, scan):
    base = Path(data_dir) / split
    return base / f"{scan}.ctv", base / f"{scan}.json"


def generate_dataset(seed, config, n_scans, fractions, data_dir):
    """
    Write n_scans phantoms as CTV volumes and label sidecars under
    data_dir/<split>/, plus a manifest. Every scan has its own seed, drawn from
    `seed` and stored in its sidecar.
    """
    if n_scans < 1:
        raise ValidationError(f"number of scans must be at least 1, got {n_scans}")
    counts = split_counts(n_scans, fractions)
    data_dir = Path(data_dir)

    rng = np.random.default_rng(seed)
    scan_seeds = rng.integers(0, 2 ** 32, size=n_scans, dtype=np.uint64)
    order = rng.permutation(n_scans)
    assignment = {}
    start = 0
    for split, count in zip(SPLITS, counts):
        assignment[split] = sorted(scan_id(int(i)) for i in order[start:start + count])
        start += count

    for split in SPLITS:
        for stale in list((data_dir / split).glob("CT*.ctv")) + list((data_dir / split).glob("CT*.json")):
            stale.unlink()

    for split in SPLITS:
        n_slices = n_positive = 0
        for scan in assignment[split]:
            scan_seed = int(scan_seeds[int(scan[2:])])
            generated = generate_scan(np.random.default_rng(scan_seed), config)
            volume_path, sidecar_path = scan_paths(data_dir, split, scan)
            write_ctv(volume_path, generated.volume)
            write_sidecar(sidecar_path, LabelSidecar(scan, generated.labels, split, scan_seed, generated.boxes))
            n_slices += generated.n_slices
            n_positive += int(generated.labels[:, 0].any())
        logger.info(f"{split}: {len(assignment[split])} scans, {n_slices} slices, {n_positive} positive scans")

    manifest = DatasetManifest(seed, n_scans, check_fractions(fractions), assignment, asdict(config))
    write_json(data_dir / MANIFEST_NAME, manifest.to_json())
    return manifest


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST_NAME
    if not path.is_file():
        raise ValidationError(f"{path}: dataset manifest not found (run synth first)")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
        return DatasetManifest(
            seed=document["seed"],
            n_scans=int(document["n_scans"]),
            split_fractions=tuple(document["split_fractions"]),
            splits={split: [str(s) for s in document["splits"].get(split, [])] for split in SPLITS},
            phantom=document["phantom"],
        )
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise FormatError(path, f"malformed manifest: {exc}") from None
