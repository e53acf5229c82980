from pathlib import Path

import pytest

from hemoscan.config import DEFAULTS, load_config, parse_config
from hemoscan.errors import ConfigError, ValidationError


@pytest.fixture
def config_file(tmp_path):
    def write(text=""):
        path = tmp_path / "run.env"
        path.write_text(text, encoding="utf-8")
        return path

    return write


def load(path, **kwargs):
    kwargs.setdefault("environ", {})
    return load_config(path, **kwargs)


# ============================================================================
# DEFAULTS AND PRECEDENCE
# ============================================================================

def test_empty_file_gives_defaults(config_file):
    config = load(config_file())
    assert config.data_dir == Path("data")
    assert config.n_scans == 200
    assert config.split_fractions == (0.8, 0.1, 0.1)
    assert config.encoder.stages == (16, 32, 64, 128)
    assert config.encoder.embedding_dim == 128
    assert config.cnn_schedule.lrs == (1e-4, 1e-4, 2e-5)
    assert config.lstm_schedule.lrs == (1e-4,) * 4
    assert config.cnn_batch_size == 4
    assert config.selector.method == "pca" and config.selector.k == 120
    assert config.lstm.input_dim == 120
    assert config.lstm.layers == 3 and config.lstm.features == 256
    assert config.weights.values == (2.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    assert config.threshold == 0.5
    assert (config.seed_synth, config.seed_cnn, config.seed_lstm) == (0, 1, 2)
    assert config.augmentation is not None
    assert config.log_level == "INFO"


def test_shipped_defaults_file_matches_builtin_defaults():
    shipped = Path(__file__).resolve().parents[1] / "config.env"
    config = load(shipped)
    assert dict(config.entries) == DEFAULTS


def test_file_overrides_defaults(config_file):
    config = load(config_file("N_SCANS=20\n# comment\nSELECTOR_K=16\nLSTM_FEATURES=32\n"))
    assert config.n_scans == 20
    assert config.selector.k == 16
    assert config.lstm.input_dim == 16
    assert config.lstm.hidden == 16


def test_environment_overrides_file(config_file):
    config = load(config_file("N_SCANS=20\n"), environ={"N_SCANS": "30", "UNRELATED": "x"})
    assert config.n_scans == 30


def test_flags_override_everything(config_file, tmp_path):
    path = config_file("SEED_CNN=5\nOUT_DIR=runs/a\n")
    config = load(path, seed=42, out=tmp_path / "b", environ={"SEED_LSTM": "9"})
    assert (config.seed_synth, config.seed_cnn, config.seed_lstm) == (42, 42, 42)
    assert config.out_dir == tmp_path / "b"


def test_dump_lists_every_key_in_order(config_file):
    config = load(config_file("THRESHOLD=0.3\n"))
    lines = config.dump().splitlines()
    assert [line.split("=", 1)[0] for line in lines] == list(DEFAULTS)
    assert "THRESHOLD=0.3" in lines


def test_log_level_is_case_insensitive(config_file):
    assert load(config_file("LOG_LEVEL=debug\n")).log_level == "DEBUG"


# ============================================================================
# TOGGLES
# ============================================================================

def test_augmentation_can_be_disabled(config_file):
    assert load(config_file("AUGMENT=false\n")).augmentation is None


def test_cnn_probs_input_uses_six_dims(config_file):
    config = load(config_file("LSTM_INPUT=cnn_probs\n"))
    assert config.lstm_input == "cnn_probs"
    assert config.lstm.input_dim == 6


def test_cnn_probs_toggle_changes_classifier_width_by_six(config_file):
    with_probs = load(config_file("LSTM_INCLUDE_CNN_PROBS=true\n")).lstm
    without = load(config_file("LSTM_INCLUDE_CNN_PROBS=no\n")).lstm
    assert with_probs.classifier_width - without.classifier_width == 6


# ============================================================================
# ERRORS
# ============================================================================

@pytest.mark.parametrize(
    "line, key",
    [
        ("N_SCANS=many", "N_SCANS"),
        ("N_SCANS=0", "N_SCANS"),
        ("THRESHOLD=1.5", "THRESHOLD"),
        ("THRESHOLD=1", "THRESHOLD"),
        ("THRESHOLD=0", "THRESHOLD"),
        ("SPLIT_FRACTIONS=0.5,0.5", "SPLIT_FRACTIONS"),
        ("SPLIT_FRACTIONS=0.5,0.5,0.5", "SPLIT_FRACTIONS"),
        ("CLASS_WEIGHTS=1,1,1", "CLASS_WEIGHTS"),
        ("CNN_LRS=1e-4,fast", "CNN_LRS"),
        ("AUGMENT=maybe", "AUGMENT"),
        ("SELECTOR_METHOD=lasso", "SELECTOR_METHOD"),
        ("SELECTOR_K=129", "SELECTOR_K"),
        ("LSTM_INPUT=pixels", "LSTM_INPUT"),
        ("LOG_LEVEL=LOUD", "LOG_LEVEL"),
        ("NOT_A_KEY=1", "NOT_A_KEY"),
    ],
)
def test_bad_value_names_the_key(config_file, line, key):
    with pytest.raises(ConfigError) as info:
        load(config_file(line + "\n"))
    assert info.value.key == key
    assert str(info.value).startswith(key)


def test_nested_validation_reported_as_config_error(config_file):
    with pytest.raises(ConfigError) as info:
        load(config_file("LSTM_FEATURES=7\n"))
    assert info.value.key == "LSTM"


def test_bad_environment_value_is_reported(config_file):
    with pytest.raises(ConfigError, match="SEED_CNN"):
        load(config_file(), environ={"SEED_CNN": "-1"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load(tmp_path / "absent.env")


def test_config_errors_are_validation_errors(config_file):
    with pytest.raises(ValidationError):
        load(config_file("N_SCANS=x\n"))


def test_parse_config_requires_every_key():
    raw = dict(DEFAULTS)
    del raw["THRESHOLD"]
    with pytest.raises(ConfigError, match="THRESHOLD"):
        parse_config(raw)
