import json

import numpy as np
import pytest

from hemoscan import pipeline
from hemoscan.cli import main
from hemoscan.scan_io import (
    N_CLASSES,
    PredictionTable,
    load_checkpoint,
    load_features,
    read_ctv,
    read_predictions,
    read_sidecar,
    write_predictions,
    write_sidecar,
)
from hemoscan.synthetic_data import SPLITS, read_manifest, scan_paths

TINY = """\
DATA_DIR={data}
OUT_DIR={out}
N_SCANS=6
SPLIT_FRACTIONS=0.5,0.25,0.25
SLICE_SIDE=16
SLICES_MIN=3
SLICES_MAX=4
POSITIVE_PROB=1.0
ENCODER_STAGES=4,8
ENCODER_BLOCKS=1
ENCODER_CARDINALITY=2
ENCODER_GROUP_WIDTH=2
EMBEDDING_DIM=8
INPUT_SIDE=16
CNN_LRS=1e-3
CNN_BATCH_SIZE=8
SELECTOR_K=4
PCA_FIT_SAMPLES=1000
LSTM_LAYERS=1
LSTM_FEATURES=8
LSTM_LRS=1e-3
"""

CHAIN = ["synth", "train-cnn", "extract", "fit-selector", "train-lstm", "predict", "evaluate"]
ARTIFACTS = ["encoder.ihdw", "features.ihdw", "selector.ihdw", "scan_model.ihdw", "predictions.csv", "report.kv"]


def run(config_path, *args, out=None):
    argv = ["--config", str(config_path)]
    if out is not None:
        argv += ["--out", str(out)]
    return main(argv + list(args))


def write_config(root, text=TINY, data=None, out=None):
    path = root / "tiny.env"
    path.write_text(text.format(data=data or root / "data", out=out or root / "out"), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    config_path = write_config(root)
    for command in CHAIN:
        assert run(config_path, command) == 0, command
    return root, config_path


def slice_count(root, split):
    manifest = read_manifest(root / "data")
    return sum(read_ctv(scan_paths(root / "data", split, scan)[0]).shape[0] for scan in manifest.splits[split])


# ============================================================================
# FULL CHAIN
# ============================================================================

def test_chain_writes_every_artifact(workspace):
    root, _ = workspace
    for name in ARTIFACTS + ["report.txt"]:
        assert (root / "out" / name).is_file(), name
    for command in CHAIN:
        assert (root / "out" / f"{command}.log").is_file(), command


def test_synth_split_sizes(workspace):
    root, _ = workspace
    manifest = read_manifest(root / "data")
    assert {split: len(ids) for split, ids in manifest.splits.items()} == {"train": 3, "val": 2, "test": 1}


def test_logs_carry_config_dump_and_epoch_lines(workspace):
    root, _ = workspace
    text = (root / "out" / "train-cnn.log").read_text(encoding="utf-8")
    assert "[CONFIG] SEED_CNN=1" in text
    assert "[CONFIG] EMBEDDING_DIM=8" in text
    assert "[SLICE-ENCODER] epoch 1/1" in text
    assert "val_weighted_log_loss=" in text
    assert "stage 3 wall time" in (root / "out" / "train-lstm.log").read_text(encoding="utf-8")
    assert "ms per slice" in (root / "out" / "predict.log").read_text(encoding="utf-8")


def test_extract_covers_every_slice(workspace):
    root, _ = workspace
    by_split = load_features(root / "out" / "features.ihdw")
    for split in SPLITS:
        records = by_split.get(split, [])
        assert sum(r.n_slices for r in records) == slice_count(root, split)
        assert all(r.embeddings.shape[1] == 8 for r in records)


def test_selector_stores_pca_basis(workspace):
    root, _ = workspace
    arrays = load_checkpoint(root / "out" / "selector.ihdw")
    assert arrays["selector/basis"].shape == (4, 8)


def test_prediction_rows_match_slices(workspace):
    root, _ = workspace
    table = read_predictions(root / "out" / "predictions.csv")
    assert table.n_rows == N_CLASSES * slice_count(root, "test")


def test_report_has_both_levels_and_weights(workspace):
    root, _ = workspace
    kv = (root / "out" / "report.kv").read_text(encoding="utf-8").splitlines()
    assert "weights=2,1,1,1,1,1" in kv
    for level in ("slice", "scan"):
        for name in ("any", "epidural", "intraparenchymal", "intraventricular", "subarachnoid", "subdural"):
            assert any(line.startswith(f"{level}.{name}.auc=") for line in kv)
    text = (root / "out" / "report.txt").read_text(encoding="utf-8")
    assert "Slice level" in text and "Scan level" in text


def test_rerun_is_byte_identical(workspace):
    root, config_path = workspace
    again = root / "again"
    for command in CHAIN[1:]:
        assert run(config_path, command, out=again) == 0, command
    for name in ARTIFACTS:
        assert (again / name).read_bytes() == (root / "out" / name).read_bytes(), name


def test_cnn_only_predictions(workspace):
    root, config_path = workspace
    assert run(config_path, "predict", "--cnn-only") == 0
    assert run(config_path, "evaluate", "--predictions", str(root / "out" / "predictions_cnn.csv")) == 0
    assert (root / "out" / "report_cnn.kv").is_file()
    cnn = read_predictions(root / "out" / "predictions_cnn.csv")
    joint = read_predictions(root / "out" / "predictions.csv")
    assert cnn.scans.keys() == joint.scans.keys()


def test_perfect_predictions_score_near_zero_loss(workspace):
    root, config_path = workspace
    table = PredictionTable()
    for scan in read_manifest(root / "data").splits["test"]:
        sidecar = read_sidecar(scan_paths(root / "data", "test", scan)[1])
        table.add(scan, sidecar.labels.astype(float))
    path = root / "out" / "predictions_perfect.csv"
    write_predictions(path, table)
    assert run(config_path, "evaluate", "--predictions", str(path)) == 0
    kv = dict(line.split("=", 1) for line in (root / "out" / "report_perfect.kv").read_text().splitlines())
    assert float(kv["slice.weighted_log_loss"]) < 1e-6
    assert float(kv["scan.weighted_log_loss"]) < 1e-6


def test_cnn_probs_scan_model_needs_no_selector(workspace, tmp_path, monkeypatch):
    root, config_path = workspace
    for name in ("encoder.ihdw", "features.ihdw"):
        (tmp_path / name).write_bytes((root / "out" / name).read_bytes())
    monkeypatch.setenv("LSTM_INPUT", "cnn_probs")
    assert run(config_path, "train-lstm", out=tmp_path) == 0
    assert run(config_path, "predict", out=tmp_path) == 0
    arrays = load_checkpoint(tmp_path / "scan_model.ihdw")
    assert arrays["lstm.l0.fwd.w_x"].shape[0] == N_CLASSES
    assert not (tmp_path / "selector.ihdw").exists()


# ============================================================================
# GRAD-CAM
# ============================================================================

def test_gradcam_one_overlay_per_positive_label(workspace):
    root, config_path = workspace
    scan = read_manifest(root / "data").splits["test"][0]
    labels = read_sidecar(scan_paths(root / "data", "test", scan)[1]).labels
    assert run(config_path, "gradcam", "--scan", scan) == 0
    written = sorted(p.name for p in (root / "out" / "gradcam").glob(f"{scan}_*.png"))
    assert len(written) == int(labels.sum())
    z = int(np.flatnonzero(labels[:, 0])[0])
    assert f"{scan}_{z}_any.png" in written


def test_gradcam_explicit_slices_and_classes(workspace, tmp_path):
    root, config_path = workspace
    (tmp_path / "encoder.ihdw").write_bytes((root / "out" / "encoder.ihdw").read_bytes())
    scan = read_manifest(root / "data").splits["train"][0]
    assert run(config_path, "gradcam", "--scan", scan, "--slices", "0,1", "--classes", "any,3", out=tmp_path) == 0
    written = sorted(p.name for p in (tmp_path / "gradcam").glob("*.png"))
    assert written == sorted(f"{scan}_{z}_{name}.png" for z in (0, 1) for name in ("any", "intraventricular"))


def test_gradcam_localization_report(workspace):
    root, config_path = workspace
    assert run(config_path, "gradcam", "--localization", "--split", "train") == 0
    result = json.loads((root / "out" / "gradcam" / "localization.json").read_text())
    assert result["split"] == "train"
    assert 0 <= result["hits"] <= result["evaluated"]


def test_gradcam_rejects_bad_requests(workspace):
    _, config_path = workspace
    assert run(config_path, "gradcam") == 2
    assert run(config_path, "gradcam", "--scan", "CT99999") == 2
    assert run(config_path, "gradcam", "--scan", "CT00000", "--classes", "bleed") == 2
    assert run(config_path, "gradcam", "--scan", "CT00000", "--slices", "x") == 2


def test_parse_classes():
    assert pipeline.parse_classes(["subdural", "0", "any"]) == [0, 5]


# ============================================================================
# VALIDATION AND EXIT CODES
# ============================================================================

def test_synth_rejects_zero_scans(tmp_path):
    config_path = write_config(tmp_path)
    assert run(config_path, "synth", "--n", "0") == 2
    assert not (tmp_path / "data").exists()


def test_synth_with_explicit_count(tmp_path):
    config_path = write_config(tmp_path)
    assert run(config_path, "synth", "--n", "4") == 0
    assert read_manifest(tmp_path / "data").n_scans == 4


def test_missing_data_fails_before_training(tmp_path, capsys):
    config_path = write_config(tmp_path)
    assert run(config_path, "train-cnn") == 2
    assert not (tmp_path / "out").exists()
    assert "manifest" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run(tmp_path / "absent.env", "synth") == 2


def test_bad_config_value(tmp_path, capsys):
    config_path = write_config(tmp_path, text=TINY + "THRESHOLD=2\n")
    assert run(config_path, "synth") == 2
    assert "THRESHOLD" in capsys.readouterr().err


def test_unknown_command(tmp_path):
    assert run(write_config(tmp_path), "train-everything") == 2


def test_threshold_at_bound_leaves_evaluate_log_alone(workspace, monkeypatch):
    root, config_path = workspace
    log = root / "out" / "evaluate.log"
    before = log.read_bytes()
    monkeypatch.setenv("THRESHOLD", "1")
    assert run(config_path, "evaluate") == 2
    assert log.read_bytes() == before


def test_predict_slice_count_mismatch_names_the_scan(workspace, tmp_path, capsys):
    root, _ = workspace
    data = tmp_path / "data"
    for path in (root / "data").rglob("*"):
        if path.is_file():
            target = data / path.relative_to(root / "data")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(path.read_bytes())
    scan = read_manifest(data).splits["test"][0]
    sidecar_path = scan_paths(data, "test", scan)[1]
    sidecar = read_sidecar(sidecar_path)
    sidecar.labels = sidecar.labels[:-1]
    sidecar.lesion_boxes = []
    write_sidecar(sidecar_path, sidecar)

    config_path = write_config(tmp_path, data=data, out=root / "out")
    assert run(config_path, "predict") == 2
    assert scan in capsys.readouterr().err


def test_runtime_failure_exit_code(workspace, monkeypatch):
    _, config_path = workspace

    def boom(config):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipeline, "cmd_extract", boom)
    assert run(config_path, "extract") == 1
