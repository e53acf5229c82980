"""
On-disk formats
CTV volumes, JSON label sidecars, IHDW checkpoint containers and prediction
tables. Byte layouts are documented in docs/FORMATS.md; every integer and float
is little-endian.
"""
import json
import logging
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

# ============================================================================
# FORMAT CONSTANTS
# ============================================================================

CTV_MAGIC = b"CTV1"
CTV_HEADER = struct.Struct("<4sIII")  # magic, slices, height, width
HU_MIN, HU_MAX = -32768, 32767

CHECKPOINT_MAGIC = b"IHDW"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<4sHI")  # magic, version, entry count
NAME_LENGTH = struct.Struct("<H")
RANK = struct.Struct("<B")
DIM = struct.Struct("<I")

CLASS_NAMES = ("any", "epidural", "intraparenchymal", "intraventricular", "subarachnoid", "subdural")
N_CLASSES = len(CLASS_NAMES)
PREDICTION_HEADER = "ID,Label"


@contextmanager
def _atomic_write(path, mode="wb"):
    """Write to a sibling temp file and move it into place once complete"""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp_path = f"{path}.tmp"
    encoding = None if "b" in mode else "utf-8"
    newline = None if "b" in mode else ""
    try:
        with open(tmp_path, mode, encoding=encoding, newline=newline) as handle:
            yield handle
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_json(path, document):
    with _atomic_write(path, "w") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _read_bytes(path):
    try:
        with open(path, "rb") as handle:
            return handle.read()
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None


# ============================================================================
# CTV VOLUMES
# ============================================================================

def write_ctv(path, volume):
    """Store an (N, H, W) HU volume losslessly as int16"""
    volume = np.asarray(volume)
    if volume.ndim != 3 or min(volume.shape) < 1:
        raise ValidationError(f"write_ctv: expected a non-empty (slices, height, width) volume, got shape {volume.shape}")
    if volume.size and (volume.min() < HU_MIN or volume.max() > HU_MAX):
        raise ValidationError(f"write_ctv: HU values must fit in int16, got range [{volume.min()}, {volume.max()}]")
    n, h, w = volume.shape
    with _atomic_write(path) as handle:
        handle.write(CTV_HEADER.pack(CTV_MAGIC, n, h, w))
        handle.write(np.ascontiguousarray(volume, dtype="<i2").tobytes())


def read_ctv(path):
    """Load a CTV file as an int16 array of shape (slices, height, width)"""
    raw = _read_bytes(path)
    if len(raw) < CTV_HEADER.size:
        raise FormatError(path, f"truncated header: need {CTV_HEADER.size} bytes, file has {len(raw)}", offset=len(raw))
    magic, n, h, w = CTV_HEADER.unpack_from(raw, 0)
    if magic != CTV_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {CTV_MAGIC!r}", offset=0)
    for offset, (label, value) in zip((4, 8, 12), (("slice count", n), ("height", h), ("width", w))):
        if value < 1:
            raise FormatError(path, f"{label} must be at least 1", offset=offset)
    expected = CTV_HEADER.size + 2 * n * h * w
    if len(raw) < expected:
        raise FormatError(path, f"truncated payload: expected {expected} bytes, got {len(raw)}", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(path, f"size mismatch: expected {expected} bytes, got {len(raw)}", offset=expected)
    values = np.frombuffer(raw, dtype="<i2", offset=CTV_HEADER.size, count=n * h * w)
    return values.astype(np.int16).reshape(n, h, w)


# ============================================================================
# LABEL SIDECARS
# ============================================================================

@dataclass(frozen=True)
class LesionBox:
    """Inclusive pixel bounding box of one planted lesion on one slice"""

    slice_index: int
    class_index: int
    row0: int
    col0: int
    row1: int
    col1: int

    def to_list(self):
        return [self.slice_index, self.class_index, self.row0, self.col0, self.row1, self.col1]


@dataclass
class LabelSidecar:
    scan_id: str
    labels: np.ndarray
    split: str = None
    seed: int = None
    lesion_boxes: list = field(default_factory=list)

    @property
    def n_slices(self):
        return int(self.labels.shape[0])


def check_labels(labels, where="labels"):
    """Validate a (T, 6) binary label matrix whose first column is the OR of the rest"""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != N_CLASSES or labels.shape[0] < 1:
        return f"{where}: expected shape (slices, {N_CLASSES}), got {labels.shape}"
    if not np.isin(labels, (0, 1)).all():
        return f"{where}: labels must be 0 or 1"
    if not np.array_equal(labels[:, 0], labels[:, 1:].max(axis=1)):
        bad = int(np.flatnonzero(labels[:, 0] != labels[:, 1:].max(axis=1))[0])
        return f"{where}: 'any' label is not the OR of the subtypes at slice {bad}"
    return None


def write_sidecar(path, sidecar):
    problem = check_labels(sidecar.labels, f"sidecar {sidecar.scan_id}")
    if problem:
        raise ValidationError(problem)
    document = {
        "scan_id": sidecar.scan_id,
        "labels": np.asarray(sidecar.labels, dtype=int).tolist(),
    }
    if sidecar.split is not None:
        document["split"] = sidecar.split
    if sidecar.seed is not None:
        document["seed"] = int(sidecar.seed)
    if sidecar.lesion_boxes:
        document["lesion_boxes"] = [box.to_list() for box in sidecar.lesion_boxes]
    with _atomic_write(path, "w") as handle:
        json.dump(document, handle, sort_keys=True)
        handle.write("\n")


def read_sidecar(path, expected_slices=None):
    """Parse a label sidecar; expected_slices, when given, must match its slice count"""
    raw = _read_bytes(path)
    try:
        document = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, f"invalid JSON: {exc}") from None
    if not isinstance(document, dict) or "scan_id" not in document or "labels" not in document:
        raise FormatError(path, "sidecar needs 'scan_id' and 'labels'")
    labels = np.asarray(document["labels"])
    problem = check_labels(labels)
    if problem:
        raise FormatError(path, problem)
    if expected_slices is not None and labels.shape[0] != expected_slices:
        raise FormatError(
            path, f"scan {document['scan_id']}: sidecar has {labels.shape[0]} slices, volume has {expected_slices}"
        )
    try:
        boxes = [LesionBox(*map(int, entry)) for entry in document.get("lesion_boxes", [])]
    except TypeError:
        raise FormatError(path, "lesion_boxes entries need six integers") from None
    return LabelSidecar(
        scan_id=str(document["scan_id"]),
        labels=labels.astype(np.uint8),
        split=document.get("split"),
        seed=document.get("seed"),
        lesion_boxes=boxes,
    )


# ============================================================================
# CHECKPOINT CONTAINER
# ============================================================================

def save_checkpoint(path, arrays):
    """
    Write named arrays as float32. arrays is a mapping or a sequence of
    (name, array) pairs; entry order is preserved.
    """
    items = list(arrays.items()) if hasattr(arrays, "items") else list(arrays)
    seen = set()
    for name, value in items:
        if name in seen:
            raise ValidationError(f"save_checkpoint: duplicate entry name {name!r}")
        seen.add(name)
        if len(name.encode("utf-8")) > 0xFFFF:
            raise ValidationError(f"save_checkpoint: entry name too long: {name[:40]!r}...")
        if np.ndim(value) > 0xFF:
            raise ValidationError(f"save_checkpoint: {name} has rank {np.ndim(value)}, limit is 255")

    with _atomic_write(path) as handle:
        handle.write(CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(items)))
        for name, value in items:
            encoded = name.encode("utf-8")
            array = np.asarray(value, dtype="<f4")
            handle.write(NAME_LENGTH.pack(len(encoded)))
            handle.write(encoded)
            handle.write(RANK.pack(array.ndim))
            for dim in array.shape:
                handle.write(DIM.pack(dim))
            handle.write(np.ascontiguousarray(array).tobytes())
    logger.debug(f"wrote {len(items)} arrays to {path}")


def load_checkpoint(path):
    """Read an IHDW container into an ordered dict of float32 arrays"""
    raw = _read_bytes(path)
    if len(raw) < CHECKPOINT_HEADER.size:
        raise FormatError(path, f"truncated header: need {CHECKPOINT_HEADER.size} bytes, file has {len(raw)}",
                          offset=len(raw))
    magic, version, count = CHECKPOINT_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, f"unsupported format version {version}, this reader handles {CHECKPOINT_VERSION}",
                          offset=4)

    def take(offset, size, what):
        if offset + size > len(raw):
            raise FormatError(path, f"truncated {what}: need {size} bytes, {len(raw) - offset} left", offset=offset)
        return offset + size

    arrays = {}
    offset = CHECKPOINT_HEADER.size
    for index in range(count):
        start = offset
        offset = take(offset, NAME_LENGTH.size, f"entry {index} name length")
        (name_length,) = NAME_LENGTH.unpack_from(raw, start)
        name_start = offset
        offset = take(offset, name_length, f"entry {index} name")
        try:
            name = raw[name_start:offset].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(path, f"entry {index} name is not valid UTF-8", offset=name_start) from None
        if name in arrays:
            raise FormatError(path, f"duplicate entry name {name!r}", offset=name_start)
        rank_at = offset
        offset = take(offset, RANK.size, f"rank of {name}")
        (rank,) = RANK.unpack_from(raw, rank_at)
        dims_at = offset
        offset = take(offset, rank * DIM.size, f"dims of {name}")
        shape = struct.unpack_from(f"<{rank}I", raw, dims_at)
        count_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data_at = offset
        offset = take(offset, 4 * count_values, f"payload of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count_values, offset=data_at).astype(np.float32).reshape(shape)
    if offset != len(raw):
        raise FormatError(path, f"{len(raw) - offset} unexpected trailing bytes after {count} entries", offset=offset)
    return arrays


# ============================================================================
# EXTRACTED FEATURES
# ============================================================================

@dataclass
class ScanFeatures:
    """Per-slice encoder outputs of one scan, in slice order"""

    scan_id: str
    split: str
    embeddings: np.ndarray
    probs: np.ndarray
    labels: np.ndarray

    @property
    def n_slices(self):
        return int(self.embeddings.shape[0])


def save_features(path, records):
    arrays = []
    for record in records:
        prefix = f"{record.split}/{record.scan_id}"
        arrays.append((f"{prefix}/embedding", record.embeddings))
        arrays.append((f"{prefix}/probs", record.probs))
        arrays.append((f"{prefix}/labels", record.labels))
    save_checkpoint(path, arrays)


def load_features(path):
    """Returns {split: [ScanFeatures, ...]} in file order"""
    arrays = load_checkpoint(path)
    grouped = {}
    for name, value in arrays.items():
        parts = name.split("/")
        if len(parts) != 3 or parts[2] not in ("embedding", "probs", "labels"):
            raise FormatError(path, f"unexpected entry {name!r} in features file")
        grouped.setdefault((parts[0], parts[1]), {})[parts[2]] = value

    by_split = {}
    for (split, scan_id), parts in grouped.items():
        if len(parts) != 3:
            raise FormatError(path, f"scan {scan_id} in split {split} is missing one of embedding/probs/labels")
        record = ScanFeatures(
            scan_id=scan_id,
            split=split,
            embeddings=parts["embedding"].astype(np.float64),
            probs=parts["probs"].astype(np.float64),
            labels=parts["labels"].astype(np.uint8),
        )
        if not (record.embeddings.shape[0] == record.probs.shape[0] == record.labels.shape[0]):
            raise FormatError(path, f"scan {scan_id}: embedding, probs and labels disagree on slice count")
        by_split.setdefault(split, []).append(record)
    return by_split


# ============================================================================
# PREDICTION TABLES
# ============================================================================

@dataclass
class PredictionTable:
    """Per-slice class probabilities keyed by scan id, each an array of shape (slices, 6)"""

    scans: dict = field(default_factory=dict)

    def add(self, scan_id, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != N_CLASSES:
            raise ValidationError(f"predictions for {scan_id}: expected shape (slices, 6), got {probs.shape}")
        self.scans[scan_id] = probs

    @property
    def n_rows(self):
        return N_CLASSES * sum(p.shape[0] for p in self.scans.values())


def write_predictions(path, table):
    for scan_id, probs in table.scans.items():
        if np.any(probs < 0) or np.any(probs > 1) or not np.all(np.isfinite(probs)):
            raise ValidationError(f"predictions for {scan_id} must lie in [0, 1]")
    with _atomic_write(path, "w") as handle:
        handle.write(PREDICTION_HEADER + "\n")
        for scan_id in sorted(table.scans):
            for slice_index, row in enumerate(table.scans[scan_id]):
                for class_name, p in zip(CLASS_NAMES, row):
                    handle.write(f"{scan_id}_{slice_index}_{class_name},{p:.6f}\n")


def read_predictions(path):
    raw = _read_bytes(path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(path, "prediction table is not valid UTF-8") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != PREDICTION_HEADER:
        raise FormatError(path, f"header must be {PREDICTION_HEADER!r}", line=1)

    cells = {}
    for line_no, line in enumerate(lines[1:], start=2):
        ident, sep, label = line.partition(",")
        parts = ident.rsplit("_", 2)
        if not sep or len(parts) != 3 or not parts[0] or parts[2] not in CLASS_NAMES or not parts[1].isdigit():
            raise FormatError(path, f"malformed row {line!r}", line=line_no)
        try:
            p = float(label)
        except ValueError:
            raise FormatError(path, f"probability {label!r} is not a number", line=line_no) from None
        if not 0.0 <= p <= 1.0:
            raise FormatError(path, f"probability {label} out of range [0, 1]", line=line_no)
        scan_cells = cells.setdefault(parts[0], {})
        key = (int(parts[1]), CLASS_NAMES.index(parts[2]))
        if key in scan_cells:
            raise FormatError(path, f"duplicate row for {ident}", line=line_no)
        scan_cells[key] = p

    table = PredictionTable()
    for scan_id in sorted(cells):
        n_slices = max(slice_index for slice_index, _ in cells[scan_id]) + 1
        probs = np.full((n_slices, N_CLASSES), np.nan)
        for (slice_index, class_index), p in cells[scan_id].items():
            probs[slice_index, class_index] = p
        if np.isnan(probs).any():
            missing = np.argwhere(np.isnan(probs))[0]
            raise FormatError(path, f"scan {scan_id} has no row for slice {missing[0]} class {CLASS_NAMES[missing[1]]}")
        table.scans[scan_id] = probs
    return table
