"""
Scan model
Stacked bidirectional LSTM over the ordered slices of one scan. Each slice's
output (forward and backward hidden states side by side) is concatenated with
the slice encoder's six class probabilities and fed to a per-slice sigmoid
classifier. One scan is one mini-batch, so no padding exists.
"""
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, TrainingDivergedError, ValidationError
from .loss_metrics import DEFAULT_WEIGHTS, training_loss, weighted_mean_log_loss
from .scan_io import N_CLASSES
from .tensor_core import (
    Adam,
    ParameterSet,
    Tape,
    Tensor,
    TrainSchedule,
    add,
    as_tensor,
    backward,
    concat,
    dropout,
    matmul,
    mul,
    sigmoid,
    split,
    stable_sigmoid,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)

# ============================================================================
# CONFIGURATION
# ============================================================================

LSTM_SCHEDULE = TrainSchedule((1e-4,) * 4)
DIRECTIONS = ("fwd", "bwd")
FORGET_BIAS = 1.0


@dataclass(frozen=True)
class LstmConfig:
    input_dim: int
    layers: int = 3
    features: int = 256  # both directions together
    dropout: float = 0.3
    include_cnn_probs: bool = True

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValidationError(f"LSTM input dim must be at least 1, got {self.input_dim}")
        if self.layers < 1:
            raise ValidationError(f"LSTM needs at least one layer, got {self.layers}")
        if self.features < 2 or self.features % 2:
            raise ValidationError(f"LSTM feature width must be even and positive, got {self.features}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"LSTM dropout must be in [0, 1), got {self.dropout}")

    @property
    def hidden(self):
        return self.features // 2

    @property
    def classifier_width(self):
        return self.features + (N_CLASSES if self.include_cnn_probs else 0)


@dataclass
class ScanSequence:
    """Per-slice selected features and encoder probabilities of one scan, in slice order"""

    scan_id: str
    features: np.ndarray
    cnn_probs: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.cnn_probs = np.atleast_2d(np.asarray(self.cnn_probs, dtype=np.float64))
        if self.features.shape[0] < 1:
            raise ValidationError(f"scan {self.scan_id}: sequence needs at least one slice")
        if self.cnn_probs.shape != (len(self), N_CLASSES):
            raise ShapeError(f"scan {self.scan_id}", self.features.shape, self.cnn_probs.shape,
                             detail="one row of 6 encoder probabilities per slice")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (len(self), N_CLASSES):
                raise ShapeError(f"scan {self.scan_id}", self.features.shape, self.labels.shape,
                                 detail="one row of 6 labels per slice")

    def __len__(self):
        return self.features.shape[0]


class ScanModel(ParameterSet):
    kind = "scan model"


@dataclass
class CellParams:
    """One direction of one layer; w_x is cut into row blocks matching the input parts"""

    w_x: tuple
    w_h: Tensor
    bias: Tensor


# ============================================================================
# BUILD
# ============================================================================

def _layer_input_dim(config, layer):
    return config.input_dim if layer == 0 else config.features


def build(config, rng):
    """Gate order along the 4H axis is input, forget, cell, output"""
    params = {}
    bound = 1.0 / math.sqrt(config.features)
    h = config.hidden
    for layer in range(config.layers):
        in_dim = _layer_input_dim(config, layer)
        for direction in DIRECTIONS:
            prefix = f"lstm.l{layer}.{direction}"
            bias = np.zeros(4 * h)
            bias[h:2 * h] = FORGET_BIAS
            params[f"{prefix}.w_x"] = Tensor(rng.uniform(-bound, bound, (in_dim, 4 * h)), requires_grad=True,
                                             name=f"{prefix}.w_x")
            params[f"{prefix}.w_h"] = Tensor(rng.uniform(-bound, bound, (h, 4 * h)), requires_grad=True,
                                             name=f"{prefix}.w_h")
            params[f"{prefix}.bias"] = Tensor(bias, requires_grad=True, name=f"{prefix}.bias")
    width = config.classifier_width
    bound = 1.0 / math.sqrt(width)
    params["classifier.weight"] = Tensor(rng.uniform(-bound, bound, (N_CLASSES, width)), requires_grad=True,
                                         name="classifier.weight")
    params["classifier.bias"] = Tensor(np.zeros(N_CLASSES), requires_grad=True, name="classifier.bias")
    return ScanModel(config, params)


def swap_directions(model):
    """
    Copy of the model with forward and backward cells exchanged. Above the first
    layer the two row halves of w_x are exchanged too, since they read the
    previous layer's forward and backward outputs.
    """
    cfg = model.config
    state = model.state_dict()
    swapped = dict(state)
    h = cfg.hidden
    for layer in range(cfg.layers):
        for name in ("w_x", "w_h", "bias"):
            fwd, bwd = state[f"lstm.l{layer}.fwd.{name}"], state[f"lstm.l{layer}.bwd.{name}"]
            if name == "w_x" and layer > 0:
                fwd = np.concatenate([fwd[h:], fwd[:h]])
                bwd = np.concatenate([bwd[h:], bwd[:h]])
            swapped[f"lstm.l{layer}.fwd.{name}"] = bwd
            swapped[f"lstm.l{layer}.bwd.{name}"] = fwd
    out = build(cfg, np.random.default_rng(0))
    return out.load_state(swapped, source="swapped parameters")


# ============================================================================
# FORWARD
# ============================================================================

def _cell(model, layer, direction):
    prefix = f"lstm.l{layer}.{direction}"
    w_x = model.params[f"{prefix}.w_x"]
    if layer > 0:
        h = model.config.hidden
        blocks = tuple(split(w_x, [h, h], axis=0))
    else:
        blocks = (w_x,)
    return CellParams(blocks, model.params[f"{prefix}.w_h"], model.params[f"{prefix}.bias"])


def lstm_cell_step(cell, x, h_prev, c_prev):
    """
    One LSTM step for a single (1, n) input row, or a tuple of row parts read by
    the matching w_x blocks. Returns (h, c), each (1, H).
    """
    parts = tuple(as_tensor(p) for p in x) if isinstance(x, (tuple, list)) else (as_tensor(x),)
    blocks = cell.w_x if isinstance(cell.w_x, (tuple, list)) else (cell.w_x,)
    h_prev, c_prev = as_tensor(h_prev), as_tensor(c_prev)
    hidden = cell.w_h.shape[0]
    if len(parts) != len(blocks):
        raise ShapeError("lstm_cell_step", (len(parts),), (len(blocks),), detail="input parts vs w_x blocks")
    if h_prev.shape != (1, hidden) or c_prev.shape != (1, hidden):
        raise ShapeError("lstm_cell_step", h_prev.shape, c_prev.shape, detail=f"state must be (1, {hidden})")

    z = matmul(parts[0], blocks[0])
    for part, block in zip(parts[1:], blocks[1:]):
        z = add(z, matmul(part, block))
    z = add(add(z, matmul(h_prev, cell.w_h)), cell.bias)
    i, f, g, o = split(z, [hidden] * 4, axis=1)
    c = add(mul(sigmoid(f), c_prev), mul(sigmoid(i), tanh(g)))
    h = mul(sigmoid(o), tanh(c))
    return h, c


def _run_direction(cell, inputs, reverse):
    hidden = cell.w_h.shape[0]
    h = Tensor(np.zeros((1, hidden)))
    c = Tensor(np.zeros((1, hidden)))
    outputs = [None] * len(inputs)
    steps = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    for t in steps:
        h, c = lstm_cell_step(cell, inputs[t], h, c)
        outputs[t] = h
    return outputs


def _sequence_features(seq):
    return seq.features if isinstance(seq, ScanSequence) else np.atleast_2d(np.asarray(seq, dtype=np.float64))


def bilstm_forward(model, seq, mode="eval", rng=None):
    """(T, k) features or a ScanSequence -> (T, F) tensor of concatenated hidden states"""
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = model.config
    features = _sequence_features(seq)
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] != cfg.input_dim:
        raise ShapeError("bilstm_forward", features.shape, (None, cfg.input_dim))
    train = mode == "train"

    inputs = [Tensor(features[t:t + 1]) for t in range(features.shape[0])]
    for layer in range(cfg.layers):
        if layer > 0:
            inputs = [tuple(dropout(part, cfg.dropout, rng, train) for part in pair) for pair in inputs]
        fwd = _run_direction(_cell(model, layer, "fwd"), inputs, reverse=False)
        bwd = _run_direction(_cell(model, layer, "bwd"), inputs, reverse=True)
        inputs = list(zip(fwd, bwd))
    return concat([concat(pair, axis=1) for pair in inputs], axis=0)


def classifier_logits(model, lstm_features, cnn_probs=None):
    lstm_features = as_tensor(lstm_features)
    if model.config.include_cnn_probs:
        if cnn_probs is None:
            raise ValidationError("this scan model reads the encoder probabilities; cnn_probs is required")
        cnn_probs = np.atleast_2d(np.asarray(cnn_probs, dtype=np.float64))
        if cnn_probs.shape[0] != lstm_features.shape[0]:
            raise ShapeError("classify_slices", lstm_features.shape, cnn_probs.shape,
                             detail="one probability row per slice")
        lstm_features = concat([lstm_features, Tensor(cnn_probs)], axis=1)
    weight = model.params["classifier.weight"]
    return add(matmul(lstm_features, transpose(weight)), model.params["classifier.bias"])


def classify_slices(model, lstm_features, cnn_probs=None):
    return stable_sigmoid(classifier_logits(model, lstm_features, cnn_probs).data)


def scan_logits(model, seq, mode="eval", rng=None):
    return classifier_logits(model, bilstm_forward(model, seq, mode, rng), seq.cnn_probs)


def predict_scan(model, seq):
    """Eval-mode per-slice probabilities (T, 6)"""
    return stable_sigmoid(scan_logits(model, seq).data)


# ============================================================================
# TRAINING
# ============================================================================

def validation_loss(model, sequences, weights=DEFAULT_WEIGHTS):
    probs = np.concatenate([predict_scan(model, seq) for seq in sequences])
    labels = np.concatenate([seq.labels for seq in sequences])
    return weighted_mean_log_loss(probs, labels, weights)


def _check_sequences(sequences, config, what):
    for seq in sequences:
        if seq.labels is None:
            raise ValidationError(f"{what} scan {seq.scan_id} has no labels")
        if seq.features.shape[1] != config.input_dim:
            raise ShapeError(f"{what} scan {seq.scan_id}", seq.features.shape, (None, config.input_dim),
                             detail="feature width differs from the LSTM input dim")


def train_scan_model(train_seqs, val_seqs, config, schedule=LSTM_SCHEDULE, rng=None, weights=DEFAULT_WEIGHTS,
                     model=None):
    """
    Adam with one scan per step, scan order reshuffled every epoch. The loss is
    the mean over the scan's slices of the summed class cross-entropy. Returns
    the parameters with the lowest validation weighted log loss.
    """
    train_seqs, val_seqs = list(train_seqs), list(val_seqs)
    if not train_seqs:
        raise ValidationError("cannot train the scan model without training sequences")
    if rng is None:
        raise ValidationError("train_scan_model needs an explicit rng")
    _check_sequences(train_seqs, config, "training")
    _check_sequences(val_seqs, config, "validation")
    if model is None:
        model = build(config, rng)
    if schedule.epochs == 0:
        logger.info("empty schedule, returning the initialized model")
        return model
    if not val_seqs:
        logger.warning("validation set is empty, selecting the checkpoint by training loss")

    optimizer = Adam(model.parameters())
    history = model.history
    best_loss, best_state = math.inf, None
    step = 0

    for epoch, lr in enumerate(schedule.lrs, start=1):
        started = time.perf_counter()
        epoch_losses = []
        for i in rng.permutation(len(train_seqs)):
            seq = train_seqs[i]
            optimizer.zero_grad()
            with Tape() as tape:
                loss = training_loss(scan_logits(model, seq, "train", rng), seq.labels)
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise TrainingDivergedError("scan_model", epoch, step, value)
            backward(tape, loss, params=optimizer.params)
            optimizer.step(lr)
            epoch_losses.append(value)
            history.step_losses.append(value)

        train_loss = float(np.mean(epoch_losses))
        val_loss = validation_loss(model, val_seqs, weights) if val_seqs else train_loss
        seconds = time.perf_counter() - started
        history.epochs.append(
            {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss, "seconds": seconds}
        )
        logger.info(f"epoch {epoch}/{schedule.epochs} lr={lr:g} train_loss={train_loss:.5f} "
                    f"val_weighted_log_loss={val_loss:.5f} time={seconds:.1f}s")
        if not math.isfinite(val_loss):
            raise TrainingDivergedError("scan_model", epoch, step, val_loss)
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.state_dict()
            history.best_epoch = epoch
            logger.info(f"retaining checkpoint from epoch {epoch}")

    model.load_state(best_state, source="best checkpoint")
    return model
