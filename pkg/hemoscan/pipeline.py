"""
Pipeline commands
Each stage reads the artifacts of the previous one from disk and writes its own:

    synth         data/<split>/CT*.ctv + .json, data/manifest.json
    train-cnn     <out>/encoder.ihdw
    extract       <out>/features.ihdw
    fit-selector  <out>/selector.ihdw
    train-lstm    <out>/scan_model.ihdw
    predict       <out>/predictions.csv (predictions_cnn.csv with --cnn-only)
    evaluate      <out>/report.txt, <out>/report.kv
    gradcam       <out>/gradcam/<scan>_<slice>_<class>.png

Every command checks its inputs first and only then opens <out>/<command>.log
and writes outputs.
"""
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import scan_model, slice_encoder
from .config import log_effective
from .errors import ValidationError
from .feature_selection import FittedSelector, fit_selector, transform
from .gradcam import grad_cam, grad_cam_any, localization_hit, overlay, overlay_name, save_png
from .logs import configure_logging
from .loss_metrics import build_report
from .preprocessing import normalize, prepare_volume
from .scan_io import (
    CLASS_NAMES,
    LabelSidecar,
    N_CLASSES,
    PredictionTable,
    ScanFeatures,
    load_checkpoint,
    load_features,
    read_ctv,
    read_predictions,
    read_sidecar,
    save_checkpoint,
    save_features,
    write_json,
    write_predictions,
)
from .synthetic_data import SPLITS, generate_dataset, read_manifest, scan_paths

logger = logging.getLogger(__name__)

ENCODER_FILE = "encoder.ihdw"
FEATURES_FILE = "features.ihdw"
SELECTOR_FILE = "selector.ihdw"
SCAN_MODEL_FILE = "scan_model.ihdw"
PREDICTIONS_FILE = "predictions.csv"
CNN_PREDICTIONS_FILE = "predictions_cnn.csv"
GRADCAM_DIR = "gradcam"
ENCODE_BATCH = 64


# ============================================================================
# HELPERS
# ============================================================================

def _require(path, producer):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: not found (run {producer} first)")
    return path


def _open_run(config, command):
    """Create the output directory, start <out>/<command>.log and dump the config"""
    config.out_dir.mkdir(parents=True, exist_ok=True)
    configure_logging(config.log_level, config.out_dir / f"{command}.log")
    log_effective(config, command)


@dataclass
class LoadedScan:
    scan_id: str
    split: str
    volume: np.ndarray
    sidecar: LabelSidecar

    @property
    def n_slices(self):
        return int(self.volume.shape[0])


def load_split(config, split, with_volumes=True):
    """Read every scan of one split listed in the dataset manifest"""
    manifest = read_manifest(config.data_dir)
    scans = []
    for scan in manifest.splits[split]:
        volume_path, sidecar_path = scan_paths(config.data_dir, split, scan)
        volume = read_ctv(volume_path) if with_volumes else None
        sidecar = read_sidecar(sidecar_path, expected_slices=None if volume is None else volume.shape[0])
        if sidecar.scan_id != scan:
            raise ValidationError(f"{sidecar_path}: sidecar is for scan {sidecar.scan_id}, manifest lists {scan}")
        if with_volumes and volume.shape[1] != volume.shape[2]:
            raise ValidationError(f"{volume_path}: slices must be square, got {volume.shape[1:]}")
        scans.append(LoadedScan(scan, split, volume, sidecar))
    return scans


def _find_scan(config, scan_id):
    manifest = read_manifest(config.data_dir)
    for split in SPLITS:
        if scan_id in manifest.splits[split]:
            return next(s for s in load_split(config, split) if s.scan_id == scan_id)
    raise ValidationError(f"scan {scan_id} is not part of the dataset in {config.data_dir}")


def _normalized(images):
    return np.stack([normalize(img) for img in images]) if len(images) else images


def load_encoder(config):
    path = _require(config.out_dir / ENCODER_FILE, "train-cnn")
    model = slice_encoder.build(config.encoder, np.random.default_rng(config.seed_cnn))
    return model.load_state(load_checkpoint(path), source=str(path))


def load_selector(config):
    path = _require(config.out_dir / SELECTOR_FILE, "fit-selector")
    selector = FittedSelector.from_arrays(load_checkpoint(path))
    if selector.input_dim != config.encoder.embedding_dim:
        raise ValidationError(f"{path}: selector expects {selector.input_dim}-dim embeddings, "
                              f"encoder produces {config.encoder.embedding_dim}")
    if selector.output_dim != config.lstm.input_dim:
        raise ValidationError(f"{path}: selector keeps {selector.output_dim} dims, "
                              f"LSTM input is configured for {config.lstm.input_dim}")
    return selector


def load_scan_model(config):
    path = _require(config.out_dir / SCAN_MODEL_FILE, "train-lstm")
    model = scan_model.build(config.lstm, np.random.default_rng(config.seed_lstm))
    return model.load_state(load_checkpoint(path), source=str(path))


def to_sequence(config, selector, scan_id, embeddings, probs, labels=None):
    if config.lstm_input == "cnn_probs":
        features = probs
    else:
        features = transform(selector, embeddings)
    return scan_model.ScanSequence(scan_id, features, probs, labels)


def _history_document(model):
    """Per-epoch losses; wall times are only logged"""
    epochs = [{key: entry[key] for key in ("epoch", "lr", "train_loss", "val_loss")} for entry in model.history.epochs]
    return {"epochs": epochs, "best_epoch": model.history.best_epoch}


# ============================================================================
# STAGE 0: SYNTHETIC DATA
# ============================================================================

def cmd_synth(config, n=None):
    n_scans = config.n_scans if n is None else n
    if n_scans < 1:
        raise ValidationError(f"number of scans must be at least 1, got {n_scans}")
    _open_run(config, "synth")
    manifest = generate_dataset(config.seed_synth, config.phantom, n_scans, config.split_fractions, config.data_dir)
    summary = ", ".join(f"{split} {len(manifest.splits[split])}" for split in SPLITS)
    logger.info(f"wrote {n_scans} scans to {config.data_dir} ({summary})")
    return manifest


# ============================================================================
# STAGE 1: SLICE ENCODER
# ============================================================================

def _slice_dataset(config, scans):
    parts = [
        slice_encoder.SliceDataset(prepare_volume(s.volume, config.encoder.input_side), s.sidecar.labels)
        for s in scans
    ]
    return slice_encoder.SliceDataset.concat(parts)


def cmd_train_cnn(config):
    train_scans = load_split(config, "train")
    val_scans = load_split(config, "val")
    if not train_scans:
        raise ValidationError(f"{config.data_dir}: the train split is empty")
    _open_run(config, "train-cnn")

    train_set = _slice_dataset(config, train_scans)
    val_set = _slice_dataset(config, val_scans)
    logger.info(f"training on {len(train_set)} slices from {len(train_scans)} scans, "
                f"validating on {len(val_set)} slices from {len(val_scans)} scans")
    model = slice_encoder.train_slice_model(
        train_set,
        val_set,
        config.encoder,
        schedule=config.cnn_schedule,
        rng=np.random.default_rng(config.seed_cnn),
        augment_cfg=config.augmentation,
        batch_size=config.cnn_batch_size,
        weights=config.weights,
    )
    path = config.out_dir / ENCODER_FILE
    save_checkpoint(path, model.state_dict())
    write_json(config.out_dir / "encoder_history.json", _history_document(model))
    logger.info(f"saved {model.parameter_count()} encoder parameters to {path}")
    return model


# ============================================================================
# EMBEDDING EXTRACTION
# ============================================================================

def cmd_extract(config):
    model = load_encoder(config)
    scans = [s for split in SPLITS for s in load_split(config, split)]
    _open_run(config, "extract")

    records = []
    for scan in scans:
        images = _normalized(prepare_volume(scan.volume, config.encoder.input_side))
        embeddings, probs = slice_encoder.encode_batch(model, images, ENCODE_BATCH)
        records.append(ScanFeatures(scan.scan_id, scan.split, embeddings, probs, scan.sidecar.labels))
    path = config.out_dir / FEATURES_FILE
    save_features(path, records)
    n_slices = sum(r.n_slices for r in records)
    logger.info(f"wrote {config.encoder.embedding_dim}-dim embeddings for {n_slices} slices "
                f"of {len(records)} scans to {path}")
    return records


# ============================================================================
# STAGE 2: FEATURE SELECTION
# ============================================================================

def _training_features(config):
    path = _require(config.out_dir / FEATURES_FILE, "extract")
    by_split = load_features(path)
    train = by_split.get("train", [])
    if not train:
        raise ValidationError(f"{path}: no training scans in the features file")
    return by_split


def cmd_fit_selector(config):
    by_split = _training_features(config)
    head_weight = None
    if config.selector.method == "head_weight":
        head_weight = slice_encoder.head_weights(load_encoder(config))
    embeddings = np.concatenate([r.embeddings for r in by_split["train"]])
    if embeddings.shape[1] != config.encoder.embedding_dim:
        raise ValidationError(f"features file holds {embeddings.shape[1]}-dim embeddings, "
                              f"EMBEDDING_DIM is {config.encoder.embedding_dim}")
    if config.lstm_input == "cnn_probs":
        logger.info("LSTM_INPUT=cnn_probs: the scan model will not read this selector")
    _open_run(config, "fit-selector")

    selector = fit_selector(config.selector, embeddings, head_weight, config.pca_fit_samples)
    if selector.method == "pca":
        cumulative = np.cumsum(selector.explained_variance_ratio())
        logger.info(f"{selector.output_dim} components explain {cumulative[-1]:.1%} of the embedding variance")
        logger.debug("cumulative explained variance: " + " ".join(f"{v:.4f}" for v in cumulative))
    path = config.out_dir / SELECTOR_FILE
    save_checkpoint(path, selector.to_arrays())
    logger.info(f"saved {selector.method} selector ({selector.input_dim} -> {selector.output_dim}) to {path}")
    return selector


# ============================================================================
# STAGE 3: SCAN MODEL
# ============================================================================

def cmd_train_lstm(config):
    by_split = _training_features(config)
    selector = load_selector(config) if config.lstm_input == "features" else None
    train_seqs = [to_sequence(config, selector, r.scan_id, r.embeddings, r.probs, r.labels) for r in by_split["train"]]
    val_seqs = [to_sequence(config, selector, r.scan_id, r.embeddings, r.probs, r.labels)
                for r in by_split.get("val", [])]
    _open_run(config, "train-lstm")

    logger.info(f"training on {len(train_seqs)} scans, {config.lstm.input_dim} inputs per slice "
                f"({config.lstm_input}), classifier width {config.lstm.classifier_width}")
    started = time.perf_counter()
    model = scan_model.train_scan_model(
        train_seqs,
        val_seqs,
        config.lstm,
        schedule=config.lstm_schedule,
        rng=np.random.default_rng(config.seed_lstm),
        weights=config.weights,
    )
    seconds = time.perf_counter() - started
    logger.info(f"stage 3 wall time {seconds:.1f}s")
    path = config.out_dir / SCAN_MODEL_FILE
    save_checkpoint(path, model.state_dict())
    write_json(config.out_dir / "scan_model_history.json", _history_document(model))
    logger.info(f"saved {model.parameter_count()} scan model parameters to {path}")
    return model


# ============================================================================
# INFERENCE AND EVALUATION
# ============================================================================

def cmd_predict(config, split="test", cnn_only=False):
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {', '.join(SPLITS)}, got {split!r}")
    scans = load_split(config, split)
    if not scans:
        raise ValidationError(f"{config.data_dir}: the {split} split is empty")
    encoder = load_encoder(config)
    model = selector = None
    if not cnn_only:
        model = load_scan_model(config)
        selector = load_selector(config) if config.lstm_input == "features" else None
    _open_run(config, "predict")

    table = PredictionTable()
    started = time.perf_counter()
    for scan in scans:
        images = _normalized(prepare_volume(scan.volume, config.encoder.input_side))
        embeddings, probs = slice_encoder.encode_batch(encoder, images, ENCODE_BATCH)
        if not cnn_only:
            probs = scan_model.predict_scan(model, to_sequence(config, selector, scan.scan_id, embeddings, probs))
        table.add(scan.scan_id, probs)
    seconds = time.perf_counter() - started
    n_slices = table.n_rows // N_CLASSES
    logger.info(f"predicted {n_slices} slices of {len(scans)} scans, {1000.0 * seconds / n_slices:.2f} ms per slice")

    path = config.out_dir / (CNN_PREDICTIONS_FILE if cnn_only else PREDICTIONS_FILE)
    write_predictions(path, table)
    logger.info(f"wrote {table.n_rows} rows to {path}")
    return table


def _report_stem(predictions_path):
    suffix = predictions_path.stem[len("predictions"):] if predictions_path.stem.startswith("predictions") else ""
    return "report" + suffix


def cmd_evaluate(config, predictions=None, split="test"):
    path = _require(predictions or config.out_dir / PREDICTIONS_FILE, "predict")
    table = read_predictions(path)
    sidecars = {s.scan_id: s.sidecar for s in load_split(config, split, with_volumes=False)}
    unknown = sorted(set(table.scans) - set(sidecars))
    if unknown:
        raise ValidationError(f"{path}: scans not in the {split} split: {', '.join(unknown[:5])}")
    labels = {scan_id: sidecars[scan_id].labels for scan_id in table.scans}
    for scan_id, probs in table.scans.items():
        if probs.shape[0] != labels[scan_id].shape[0]:
            raise ValidationError(f"scan {scan_id}: {probs.shape[0]} predicted slices, "
                                  f"sidecar has {labels[scan_id].shape[0]}")
    _open_run(config, "evaluate")

    report = build_report(table.scans, labels, config.weights, config.threshold, source=path.name)
    stem = _report_stem(path)
    (config.out_dir / f"{stem}.txt").write_text(report.to_text(), encoding="utf-8")
    (config.out_dir / f"{stem}.kv").write_text(report.to_kv(), encoding="utf-8")
    for line in report.to_text().splitlines():
        logger.info(line)
    return report


# ============================================================================
# GRAD-CAM
# ============================================================================

def parse_classes(values):
    """Class names or indices -> sorted unique indices"""
    indices = set()
    for value in values:
        value = str(value).strip()
        if value.isdigit() and int(value) < N_CLASSES:
            indices.add(int(value))
        elif value in CLASS_NAMES:
            indices.add(CLASS_NAMES.index(value))
        else:
            raise ValidationError(f"unknown class {value!r}, expected one of {', '.join(CLASS_NAMES)} or 0..5")
    return sorted(indices)


def _heatmap(model, image, class_index, source):
    if class_index == 0:
        return grad_cam_any(model, image, source)
    return grad_cam(model, image, class_index, source)


def cmd_gradcam(config, scan_id=None, classes=None, slices=None, localization=False, split="test"):
    """
    Overlays for one scan. Without --classes every positive label of each
    chosen slice gets an overlay; without --slices every slice carrying one of
    the chosen classes is used. --localization instead scores the heatmaps of
    all true-positive subtype slices of a split against the lesion boxes.
    """
    if localization:
        return _localization_report(config, split)
    if scan_id is None:
        raise ValidationError("gradcam needs --scan unless --localization is given")
    model = load_encoder(config)
    scan = _find_scan(config, scan_id)
    class_filter = parse_classes(classes) if classes else None
    labels = scan.sidecar.labels
    if slices:
        bad = [z for z in slices if not 0 <= z < scan.n_slices]
        if bad:
            raise ValidationError(f"scan {scan_id} has {scan.n_slices} slices, got slice index {bad[0]}")
        chosen = sorted(set(slices))
    else:
        wanted = class_filter if class_filter is not None else list(range(N_CLASSES))
        chosen = [z for z in range(scan.n_slices) if labels[z, wanted].any()]

    jobs = []
    for z in chosen:
        if class_filter is not None and slices:
            jobs.extend((z, t) for t in class_filter)
        else:
            positive = np.flatnonzero(labels[z]).tolist()
            jobs.extend((z, t) for t in positive if class_filter is None or t in class_filter)
    if not jobs:
        raise ValidationError(f"scan {scan_id}: nothing to visualize for the requested slices and classes")
    _open_run(config, "gradcam")

    images = prepare_volume(scan.volume[sorted({z for z, _ in jobs})], config.encoder.input_side)
    by_slice = dict(zip(sorted({z for z, _ in jobs}), images))
    written, zero = [], 0
    for z, t in jobs:
        source = f"{scan_id}_{z}"
        heatmap = _heatmap(model, normalize(by_slice[z]), t, source)
        zero += heatmap.is_zero
        path = config.out_dir / GRADCAM_DIR / overlay_name(scan_id, z, t)
        written.append(save_png(path, overlay(heatmap, by_slice[z][0])))
    logger.info(f"wrote {len(written)} overlays to {config.out_dir / GRADCAM_DIR}")
    if zero:
        logger.warning(f"{zero} of {len(written)} heatmaps were all zero")
    return written


@dataclass
class LocalizationResult:
    evaluated: int
    hits: int
    zero_maps: int

    @property
    def hit_rate(self):
        return self.hits / self.evaluated if self.evaluated else float("nan")


def _localization_report(config, split):
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {', '.join(SPLITS)}, got {split!r}")
    model = load_encoder(config)
    scans = load_split(config, split)
    _open_run(config, "gradcam")

    result = LocalizationResult(0, 0, 0)
    for scan in scans:
        labels = scan.sidecar.labels
        if not labels[:, 1:].any():
            continue
        images = prepare_volume(scan.volume, config.encoder.input_side)
        normalized = _normalized(images)
        _, probs = slice_encoder.encode_batch(model, normalized, ENCODE_BATCH)
        for z, t in zip(*np.nonzero(labels[:, 1:])):
            t = int(t) + 1
            if probs[z, t] < config.threshold:
                continue
            boxes = [b for b in scan.sidecar.lesion_boxes if b.slice_index == z and b.class_index == t]
            if not boxes:
                continue
            heatmap = grad_cam(model, normalized[z], t, f"{scan.scan_id}_{z}")
            result.evaluated += 1
            if heatmap.is_zero:
                result.zero_maps += 1
                continue
            side = scan.volume.shape[-1]
            result.hits += any(localization_hit(heatmap, box, side) for box in boxes)

    if result.evaluated:
        logger.info(f"localization: {result.hits}/{result.evaluated} true-positive subtype slices hit "
                    f"(rate {result.hit_rate:.3f}, {result.zero_maps} all-zero maps) on {split}")
    else:
        logger.warning(f"localization: no true-positive subtype slices with lesion boxes on {split}")
    write_json(config.out_dir / GRADCAM_DIR / "localization.json",
               {"split": split, "evaluated": result.evaluated, "hits": result.hits, "zero_maps": result.zero_maps})
    return result
