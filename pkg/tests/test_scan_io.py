import numpy as np
import pytest

from hemoscan.errors import FormatError, ValidationError
from hemoscan.scan_io import (
    CLASS_NAMES,
    LabelSidecar,
    LesionBox,
    PredictionTable,
    ScanFeatures,
    load_checkpoint,
    load_features,
    read_ctv,
    read_predictions,
    read_sidecar,
    save_checkpoint,
    save_features,
    write_ctv,
    write_predictions,
    write_sidecar,
)


def labels_for(n_slices, positive_slices=()):
    labels = np.zeros((n_slices, 6), dtype=np.uint8)
    for s in positive_slices:
        labels[s, 0] = labels[s, 5] = 1
    return labels


# ============================================================================
# CTV
# ============================================================================

def test_ctv_round_trip(tmp_path, rng):
    volume = rng.integers(-1000, 1500, size=(3, 8, 9)).astype(np.int16)
    path = tmp_path / "scan.ctv"
    write_ctv(path, volume)
    loaded = read_ctv(path)
    assert loaded.dtype == np.int16
    np.testing.assert_array_equal(loaded, volume)


def test_single_voxel_ctv_is_eighteen_bytes(tmp_path):
    path = tmp_path / "one.ctv"
    write_ctv(path, np.full((1, 1, 1), -1000))
    raw = path.read_bytes()
    assert len(raw) == 18
    assert raw[:4] == b"CTV1"
    assert raw[16:] == (-1000).to_bytes(2, "little", signed=True)


def test_ctv_truncated_payload_names_sizes(tmp_path):
    path = tmp_path / "cut.ctv"
    write_ctv(path, np.zeros((2, 4, 4)))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError, match="truncated payload: expected 80 bytes, got 79") as excinfo:
        read_ctv(path)
    assert excinfo.value.offset == 79


def test_ctv_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "long.ctv"
    write_ctv(path, np.zeros((1, 2, 2)))
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(FormatError, match="size mismatch"):
        read_ctv(path)


def test_write_ctv_rejects_values_outside_int16(tmp_path):
    with pytest.raises(ValidationError):
        write_ctv(tmp_path / "x.ctv", np.full((1, 2, 2), 40000))


def test_ctv_header_fuzz_rejects_every_single_byte_change(tmp_path):
    path = tmp_path / "fuzz.ctv"
    write_ctv(path, np.arange(24).reshape(2, 3, 4))
    pristine = bytearray(path.read_bytes())
    rejected = 0
    for position in range(16):
        for delta in range(1, 256):
            mutated = bytearray(pristine)
            mutated[position] = (mutated[position] + delta) % 256
            path.write_bytes(bytes(mutated))
            with pytest.raises(FormatError):
                read_ctv(path)
            rejected += 1
    assert rejected == 16 * 255


# ============================================================================
# SIDECARS
# ============================================================================

def test_sidecar_round_trip_with_boxes(tmp_path):
    sidecar = LabelSidecar(
        scan_id="CT00003",
        labels=labels_for(4, positive_slices=(1, 2)),
        split="val",
        seed=99,
        lesion_boxes=[LesionBox(1, 5, 10, 12, 20, 30), LesionBox(2, 5, 11, 12, 19, 28)],
    )
    path = tmp_path / "CT00003.json"
    write_sidecar(path, sidecar)
    loaded = read_sidecar(path, expected_slices=4)
    assert loaded.scan_id == "CT00003"
    assert loaded.split == "val"
    assert loaded.seed == 99
    assert loaded.lesion_boxes == sidecar.lesion_boxes
    np.testing.assert_array_equal(loaded.labels, sidecar.labels)


def test_sidecar_any_label_must_be_or_of_subtypes(tmp_path):
    labels = labels_for(3)
    labels[1, 2] = 1
    with pytest.raises(ValidationError, match="slice 1"):
        write_sidecar(tmp_path / "bad.json", LabelSidecar("s", labels))


def test_sidecar_slice_count_mismatch_names_scan(tmp_path):
    path = tmp_path / "s.json"
    write_sidecar(path, LabelSidecar("CT00007", labels_for(3)))
    with pytest.raises(FormatError, match="CT00007"):
        read_sidecar(path, expected_slices=5)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def test_empty_checkpoint_is_ten_bytes(tmp_path):
    path = tmp_path / "empty.ihdw"
    save_checkpoint(path, {})
    assert len(path.read_bytes()) == 10
    assert load_checkpoint(path) == {}


def test_checkpoint_round_trip_rank_three(tmp_path, rng):
    arrays = {
        "stem.weight": rng.normal(size=(2, 3, 4)),
        "head.bias": rng.normal(size=6),
        "scalar": np.float64(0.25),
    }
    path = tmp_path / "m.ihdw"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for name, value in arrays.items():
        assert loaded[name].shape == np.shape(value)
        np.testing.assert_array_equal(loaded[name], np.asarray(value, dtype=np.float32))


def test_checkpoint_rejects_duplicate_names_on_save(tmp_path):
    with pytest.raises(ValidationError, match="duplicate"):
        save_checkpoint(tmp_path / "d.ihdw", [("w", np.ones(2)), ("w", np.zeros(2))])


def test_checkpoint_flipped_magic_rejected(tmp_path):
    path = tmp_path / "m.ihdw"
    save_checkpoint(path, {"w": np.ones(3)})
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="bad magic"):
        load_checkpoint(path)


def test_checkpoint_future_version_rejected(tmp_path):
    path = tmp_path / "m.ihdw"
    save_checkpoint(path, {"w": np.ones(3)})
    raw = bytearray(path.read_bytes())
    raw[4] = 2
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="unsupported format version 2"):
        load_checkpoint(path)


def test_checkpoint_truncated_payload_reports_entry(tmp_path):
    path = tmp_path / "m.ihdw"
    save_checkpoint(path, {"weights": np.ones((4, 4))})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError, match="payload of weights"):
        load_checkpoint(path)


def test_checkpoint_header_fuzz_rejects_every_single_byte_change(tmp_path, rng):
    path = tmp_path / "fuzz.ihdw"
    save_checkpoint(path, {"a": rng.normal(size=(2, 2)), "b": rng.normal(size=3)})
    pristine = bytearray(path.read_bytes())
    for position in range(6):
        for delta in range(1, 256):
            mutated = bytearray(pristine)
            mutated[position] = (mutated[position] + delta) % 256
            path.write_bytes(bytes(mutated))
            with pytest.raises(FormatError):
                load_checkpoint(path)


def test_features_file_groups_by_split(tmp_path, rng):
    records = [
        ScanFeatures("CT00000", "train", rng.normal(size=(3, 8)), rng.uniform(size=(3, 6)), labels_for(3, (1,))),
        ScanFeatures("CT00001", "val", rng.normal(size=(2, 8)), rng.uniform(size=(2, 6)), labels_for(2)),
    ]
    path = tmp_path / "features.ihdw"
    save_features(path, records)
    loaded = load_features(path)
    assert sorted(loaded) == ["train", "val"]
    train = loaded["train"][0]
    assert train.scan_id == "CT00000" and train.n_slices == 3
    np.testing.assert_allclose(train.embeddings, records[0].embeddings, rtol=1e-6)
    np.testing.assert_array_equal(train.labels, records[0].labels)


# ============================================================================
# PREDICTION TABLES
# ============================================================================

def test_prediction_rows_for_one_slice(tmp_path):
    table = PredictionTable()
    table.add("s1", np.full((1, 6), 0.5))
    path = tmp_path / "p.csv"
    write_predictions(path, table)
    lines = path.read_text().splitlines()
    assert lines[0] == "ID,Label"
    assert lines[1:] == [f"s1_0_{name},0.500000" for name in CLASS_NAMES]


def test_prediction_table_survives_rewrite(tmp_path, rng):
    table = PredictionTable()
    table.add("CT_B", rng.uniform(size=(3, 6)))
    table.add("CT_A", rng.uniform(size=(2, 6)))
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_predictions(first, table)
    parsed = read_predictions(first)
    assert list(parsed.scans) == ["CT_A", "CT_B"]
    np.testing.assert_allclose(parsed.scans["CT_B"], table.scans["CT_B"], atol=5e-7)
    write_predictions(second, parsed)
    assert first.read_bytes() == second.read_bytes()


def test_prediction_out_of_range_names_line(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("ID,Label\ns1_0_any,0.100000\ns1_0_epidural,1.200000\n")
    with pytest.raises(FormatError, match="out of range") as excinfo:
        read_predictions(path)
    assert excinfo.value.line == 3


def test_prediction_malformed_id_names_line(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("ID,Label\ns1_x_any,0.1\n")
    with pytest.raises(FormatError, match="line 2"):
        read_predictions(path)


def test_prediction_blank_line_inside_table_rejected(tmp_path):
    path = tmp_path / "p.csv"
    rows = "".join(f"s1_0_{name},0.5\n" for name in CLASS_NAMES)
    path.write_text("ID,Label\n" + rows + "\n")
    with pytest.raises(FormatError):
        read_predictions(path)
