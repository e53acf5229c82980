"""
Pipeline configuration
One dotenv-style file (KEY=VALUE lines, # comments) describes a whole run.
Precedence, highest first: command-line flags, process environment, the
config file, the defaults below. config.env at the repository root lists every
key with its default.
"""
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import dotenv_values

from .errors import ConfigError, ValidationError
from .feature_selection import METHODS, MODES, SelectorSpec
from .loss_metrics import ClassWeights
from .preprocessing import AugmentationConfig
from .scan_model import LstmConfig
from .slice_encoder import EncoderConfig
from .synthetic_data import PhantomConfig, check_fractions
from .tensor_core import TrainSchedule

logger = logging.getLogger(__name__)

# ============================================================================
# DEFAULTS
# ============================================================================

DEFAULTS = {
    # Paths
    "DATA_DIR": "data",
    "OUT_DIR": "runs/latest",
    # Synthetic phantoms
    "N_SCANS": "200",
    "SPLIT_FRACTIONS": "0.8,0.1,0.1",
    "SLICE_SIDE": "64",
    "SLICES_MIN": "16",
    "SLICES_MAX": "24",
    "POSITIVE_PROB": "0.5",
    "NOISE_SIGMA": "4",
    "EPH_RARITY": "5",
    # Slice encoder
    "ENCODER_STAGES": "16,32,64,128",
    "ENCODER_BLOCKS": "1",
    "ENCODER_CARDINALITY": "4",
    "ENCODER_GROUP_WIDTH": "4",
    "EMBEDDING_DIM": "128",
    "INPUT_SIDE": "64",
    "CNN_LRS": "1e-4,1e-4,2e-5",
    "CNN_BATCH_SIZE": "4",
    # Augmentation
    "AUGMENT": "true",
    "AUG_PROB": "0.5",
    "AUG_FLIP_PROB": "0.5",
    "AUG_ROTATION": "15",
    "AUG_SHIFT": "0.1",
    "AUG_SCALE": "0.9,1.1",
    "AUG_BRIGHTNESS": "0.1",
    # Feature selection
    "SELECTOR_METHOD": "pca",
    "SELECTOR_K": "120",
    "SELECTOR_MODE": "largest",
    "PCA_FIT_SAMPLES": "30000",
    # Scan model
    "LSTM_LAYERS": "3",
    "LSTM_FEATURES": "256",
    "LSTM_DROPOUT": "0.3",
    "LSTM_INCLUDE_CNN_PROBS": "true",
    "LSTM_INPUT": "features",
    "LSTM_LRS": "1e-4,1e-4,1e-4,1e-4",
    # Evaluation
    "CLASS_WEIGHTS": "2,1,1,1,1,1",
    "THRESHOLD": "0.5",
    # Seeds
    "SEED_SYNTH": "0",
    "SEED_CNN": "1",
    "SEED_LSTM": "2",
    "LOG_LEVEL": "INFO",
}

LSTM_INPUTS = ("features", "cnn_probs")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
TRUE_VALUES = ("1", "true", "yes", "on")
FALSE_VALUES = ("0", "false", "no", "off")


# ============================================================================
# VALUE PARSERS
# ============================================================================

def _int(raw, key, minimum=None):
    try:
        value = int(raw[key])
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {raw[key]!r}") from None
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be at least {minimum}, got {value}")
    return value


def _float(raw, key, low=None, high=None, open_interval=False):
    try:
        value = float(raw[key])
    except ValueError:
        raise ConfigError(key, f"expected a number, got {raw[key]!r}") from None
    if open_interval and not low < value < high:
        raise ConfigError(key, f"must lie strictly between {low:g} and {high:g}, got {value:g}")
    if low is not None and value < low:
        raise ConfigError(key, f"must be at least {low:g}, got {value:g}")
    if high is not None and value > high:
        raise ConfigError(key, f"must be at most {high:g}, got {value:g}")
    return value


def _list(raw, key, cast=float, length=None):
    text = raw[key].strip()
    items = [item.strip() for item in text.split(",")] if text else []
    try:
        values = tuple(cast(item) for item in items)
    except ValueError:
        raise ConfigError(key, f"expected a comma-separated list of numbers, got {raw[key]!r}") from None
    if length is not None and len(values) != length:
        raise ConfigError(key, f"expected {length} values, got {len(values)}")
    return values


def _bool(raw, key):
    value = raw[key].strip().lower()
    if value in TRUE_VALUES:
        return True
    if value in FALSE_VALUES:
        return False
    raise ConfigError(key, f"expected true or false, got {raw[key]!r}")


def _choice(raw, key, choices):
    value = raw[key].strip()
    if value not in choices:
        raise ConfigError(key, f"must be one of {', '.join(choices)}, got {value!r}")
    return value


def _build(group, factory, **kwargs):
    """Construct a nested config, reporting its validation errors under the key group"""
    try:
        return factory(**kwargs)
    except ConfigError:
        raise
    except ValidationError as exc:
        raise ConfigError(group, str(exc)) from None


# ============================================================================
# PIPELINE CONFIG
# ============================================================================

@dataclass(frozen=True)
class PipelineConfig:
    data_dir: Path
    out_dir: Path
    n_scans: int
    split_fractions: tuple
    phantom: PhantomConfig
    encoder: EncoderConfig
    cnn_schedule: TrainSchedule
    cnn_batch_size: int
    augmentation: AugmentationConfig  # None when AUGMENT=false
    selector: SelectorSpec
    pca_fit_samples: int
    lstm: LstmConfig
    lstm_input: str
    lstm_schedule: TrainSchedule
    weights: ClassWeights
    threshold: float
    seed_synth: int
    seed_cnn: int
    seed_lstm: int
    log_level: str
    entries: tuple = ()  # effective (KEY, value) pairs in DEFAULTS order

    def dump(self):
        return "\n".join(f"{key}={value}" for key, value in self.entries)


def load_config(path, seed=None, out=None, environ=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"{path}: config file not found")
    file_values = {k: v for k, v in dotenv_values(path).items()}
    unknown = sorted(set(file_values) - set(DEFAULTS))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key in {path}")
    missing_value = [k for k, v in file_values.items() if v is None]
    if missing_value:
        raise ConfigError(missing_value[0], f"key without a value in {path}")

    environ = os.environ if environ is None else environ
    raw = {}
    for key, default in DEFAULTS.items():
        if key in environ:
            raw[key] = environ[key]
        else:
            raw[key] = file_values.get(key, default)
    if seed is not None:
        for key in ("SEED_SYNTH", "SEED_CNN", "SEED_LSTM"):
            raw[key] = str(seed)
    if out is not None:
        raw["OUT_DIR"] = str(out)
    return parse_config(raw)


def parse_config(raw):
    """Build a PipelineConfig from a complete KEY -> string mapping"""
    missing = [key for key in DEFAULTS if key not in raw]
    if missing:
        raise ConfigError(missing[0], "missing value")
    raw = dict(raw)
    raw["LOG_LEVEL"] = raw["LOG_LEVEL"].strip().upper()

    fractions = _list(raw, "SPLIT_FRACTIONS", length=3)
    _build("SPLIT_FRACTIONS", check_fractions, fractions=fractions)

    phantom = _build(
        "PHANTOM",
        PhantomConfig,
        slice_side=_int(raw, "SLICE_SIDE", 16),
        slices_min=_int(raw, "SLICES_MIN", 2),
        slices_max=_int(raw, "SLICES_MAX", 2),
        positive_prob=_float(raw, "POSITIVE_PROB", 0.0, 1.0),
        noise_sigma=_float(raw, "NOISE_SIGMA", 0.0),
        eph_rarity=_float(raw, "EPH_RARITY", 1.0),
    )

    encoder = _build(
        "ENCODER",
        EncoderConfig,
        stages=_list(raw, "ENCODER_STAGES", cast=int),
        blocks=_int(raw, "ENCODER_BLOCKS", 1),
        cardinality=_int(raw, "ENCODER_CARDINALITY", 1),
        group_width=_int(raw, "ENCODER_GROUP_WIDTH", 1),
        embedding_dim=_int(raw, "EMBEDDING_DIM", 8),
        input_side=_int(raw, "INPUT_SIDE", 8),
    )

    augmentation = None
    if _bool(raw, "AUGMENT"):
        augmentation = _build(
            "AUG",
            AugmentationConfig.symmetric,
            prob=_float(raw, "AUG_PROB", 0.0, 1.0),
            flip_prob=_float(raw, "AUG_FLIP_PROB", 0.0, 1.0),
            rotation=_float(raw, "AUG_ROTATION", 0.0, 180.0),
            shift=_float(raw, "AUG_SHIFT", 0.0, 1.0),
            scale=_list(raw, "AUG_SCALE", length=2),
            brightness=_float(raw, "AUG_BRIGHTNESS", 0.0, 1.0),
        )

    selector = SelectorSpec(
        method=_choice(raw, "SELECTOR_METHOD", METHODS),
        k=_int(raw, "SELECTOR_K", 1),
        mode=_choice(raw, "SELECTOR_MODE", MODES),
    )
    if selector.k > encoder.embedding_dim:
        raise ConfigError("SELECTOR_K", f"cannot select {selector.k} of {encoder.embedding_dim} embedding dims")

    lstm_input = _choice(raw, "LSTM_INPUT", LSTM_INPUTS)
    lstm = _build(
        "LSTM",
        LstmConfig,
        input_dim=6 if lstm_input == "cnn_probs" else selector.k,
        layers=_int(raw, "LSTM_LAYERS", 1),
        features=_int(raw, "LSTM_FEATURES", 2),
        dropout=_float(raw, "LSTM_DROPOUT", 0.0),
        include_cnn_probs=_bool(raw, "LSTM_INCLUDE_CNN_PROBS"),
    )

    config = PipelineConfig(
        data_dir=Path(raw["DATA_DIR"]),
        out_dir=Path(raw["OUT_DIR"]),
        n_scans=_int(raw, "N_SCANS", 1),
        split_fractions=fractions,
        phantom=phantom,
        encoder=encoder,
        cnn_schedule=_build("CNN_LRS", TrainSchedule, lrs=_list(raw, "CNN_LRS")),
        cnn_batch_size=_int(raw, "CNN_BATCH_SIZE", 1),
        augmentation=augmentation,
        selector=selector,
        pca_fit_samples=_int(raw, "PCA_FIT_SAMPLES", 2),
        lstm=lstm,
        lstm_input=lstm_input,
        lstm_schedule=_build("LSTM_LRS", TrainSchedule, lrs=_list(raw, "LSTM_LRS")),
        weights=_build("CLASS_WEIGHTS", ClassWeights, values=_list(raw, "CLASS_WEIGHTS", length=6)),
        threshold=_float(raw, "THRESHOLD", 0.0, 1.0, open_interval=True),
        seed_synth=_int(raw, "SEED_SYNTH", 0),
        seed_cnn=_int(raw, "SEED_CNN", 0),
        seed_lstm=_int(raw, "SEED_LSTM", 0),
        log_level=_choice(raw, "LOG_LEVEL", LOG_LEVELS),
        entries=tuple((key, raw[key].strip()) for key in DEFAULTS),
    )
    return config


def log_effective(config, source):
    logger.info(f"effective configuration ({source})")
    for line in config.dump().splitlines():
        logger.info(line)
