"""
Slice encoder
Grouped-bottleneck residual CNN mapping one normalized 3-channel slice to a
D-dim embedding and six independent class probabilities, and its training loop.
"""
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, TrainingDivergedError, ValidationError
from .loss_metrics import DEFAULT_WEIGHTS, training_loss, weighted_mean_log_loss
from .preprocessing import DEFAULT_STATS, augment, normalize
from .scan_io import N_CLASSES
from .tensor_core import (
    Adam,
    ParameterSet,
    Tape,
    Tensor,
    TrainSchedule,
    add,
    backward,
    conv2d,
    global_avg_pool,
    matmul,
    max_pool2d,
    relu,
    stable_sigmoid,
    transpose,
)

logger = logging.getLogger(__name__)

# ============================================================================
# CONFIGURATION
# ============================================================================

DEFAULT_BATCH_SIZE = 4
PRIOR_CLIP = 1e-3  # prevalence bounds for the head bias start
CNN_SCHEDULE = TrainSchedule((1e-4, 1e-4, 2e-5))


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple = (16, 32, 64, 128)
    blocks: int = 1
    cardinality: int = 4
    group_width: int = 4
    embedding_dim: int = 128
    input_side: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))
        if not self.stages:
            raise ValidationError("encoder needs at least one stage")
        if self.blocks < 1:
            raise ValidationError(f"blocks per stage must be at least 1, got {self.blocks}")
        if self.cardinality < 1 or self.group_width < 1:
            raise ValidationError("cardinality and group width must be at least 1")
        if self.bottleneck > min(self.stages):
            raise ValidationError(
                f"cardinality x group width ({self.bottleneck}) exceeds the narrowest stage ({min(self.stages)})"
            )
        if self.embedding_dim < 8:
            raise ValidationError(f"embedding dim must be at least 8, got {self.embedding_dim}")
        if self.input_side < max(8, 2 ** len(self.stages)):
            raise ValidationError(
                f"input side {self.input_side} is too small for {len(self.stages)} downsampling stages"
            )

    @property
    def bottleneck(self):
        return self.cardinality * self.group_width


class EncoderModel(ParameterSet):
    kind = "encoder"


# ============================================================================
# BUILD
# ============================================================================

def _he_uniform(rng, shape):
    fan_in = shape[1] * shape[2] * shape[3]
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def layer_shapes(config):
    """Ordered (name, kernel shape) for every conv layer the config implies"""
    shapes = [("stem", (config.stages[0], 3, 3, 3))]
    in_ch = config.stages[0]
    mid = config.bottleneck
    for s, width in enumerate(config.stages):
        for b in range(config.blocks):
            prefix = f"stage{s}.block{b}"
            stride = 2 if s > 0 and b == 0 else 1
            shapes.append((f"{prefix}.reduce", (mid, in_ch, 1, 1)))
            shapes.append((f"{prefix}.grouped", (mid, mid // config.cardinality, 3, 3)))
            shapes.append((f"{prefix}.expand", (width, mid, 1, 1)))
            if in_ch != width or stride != 1:
                shapes.append((f"{prefix}.project", (width, in_ch, 1, 1)))
            in_ch = width
    if config.embedding_dim != in_ch:
        shapes.append(("embed", (config.embedding_dim, in_ch, 1, 1)))
    return shapes


def build(config, rng):
    """He-uniform conv kernels, zero biases, head weights uniform in +-1/sqrt(D)"""
    params = {}
    for name, shape in layer_shapes(config):
        params[f"{name}.weight"] = Tensor(_he_uniform(rng, shape), requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True, name=f"{name}.bias")
    bound = 1.0 / math.sqrt(config.embedding_dim)
    params["head.weight"] = Tensor(rng.uniform(-bound, bound, (N_CLASSES, config.embedding_dim)),
                                   requires_grad=True, name="head.weight")
    params["head.bias"] = Tensor(np.zeros(N_CLASSES), requires_grad=True, name="head.bias")
    return EncoderModel(config, params)


# ============================================================================
# FORWARD
# ============================================================================

def _conv(model, name, x, stride=1, padding=0, groups=1):
    return conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"], stride, padding, groups)


def residual_block(model, prefix, x, stride):
    h = relu(_conv(model, f"{prefix}.reduce", x))
    h = relu(_conv(model, f"{prefix}.grouped", h, stride=stride, padding=1, groups=model.config.cardinality))
    h = _conv(model, f"{prefix}.expand", h)
    if f"{prefix}.project.weight" in model.params:
        shortcut = _conv(model, f"{prefix}.project", x, stride=stride)
    else:
        shortcut = x
    return relu(add(h, shortcut))


def trunk(model, images):
    """Normalized (N, 3, S, S) images -> last-stage activation maps (N, D, s, s)"""
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.input_side, cfg.input_side):
        raise ShapeError("encode", x.shape, (None, 3, cfg.input_side, cfg.input_side),
                         detail=f"encoder expects {cfg.input_side}x{cfg.input_side} 3-channel input")
    x = max_pool2d(relu(_conv(model, "stem", x, padding=1)))
    for s in range(len(cfg.stages)):
        for b in range(cfg.blocks):
            x = residual_block(model, f"stage{s}.block{b}", x, stride=2 if s > 0 and b == 0 else 1)
    if "embed.weight" in model.params:
        x = relu(_conv(model, "embed", x))
    return x


def head(model, fmap):
    """Activation maps -> (logits (N, 6), pooled embeddings (N, D))"""
    pooled = global_avg_pool(fmap)
    logits = add(matmul(pooled, transpose(model.params["head.weight"])), model.params["head.bias"])
    return logits, pooled


def forward(model, images):
    logits, _ = head(model, trunk(model, images))
    return logits


@dataclass
class SliceOutput:
    embedding: np.ndarray
    probs: np.ndarray


def encode_batch(model, images, batch_size=64):
    """Inference over many normalized images; returns (embeddings (N, D), probs (N, 6))"""
    images = np.asarray(images)
    embeddings, probs = [], []
    for start in range(0, len(images), batch_size):
        logits, pooled = head(model, trunk(model, images[start:start + batch_size]))
        embeddings.append(pooled.data)
        probs.append(stable_sigmoid(logits.data))
    if not embeddings:
        return np.zeros((0, model.config.embedding_dim)), np.zeros((0, N_CLASSES))
    return np.concatenate(embeddings), np.concatenate(probs)


def encode(model, image):
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError("encode", image.shape, detail="expected one (3, S, S) image")
    embeddings, probs = encode_batch(model, image[None])
    return SliceOutput(embedding=embeddings[0], probs=probs[0])


def head_weights(model):
    return model.params["head.weight"].data.copy()


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class SliceDataset:
    """Windowed (not normalized) slice images with their 6-class labels"""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.images) != len(self.labels):
            raise ShapeError("SliceDataset", np.shape(self.images), self.labels.shape)

    def __len__(self):
        return len(self.images)

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.zeros((0, 3, 1, 1), dtype=np.float32), np.zeros((0, N_CLASSES)))
        return cls(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def _normalized(images, stats):
    return np.stack([normalize(img, stats) for img in images])


def validation_loss(model, dataset, weights=DEFAULT_WEIGHTS, stats=DEFAULT_STATS, batch_size=64):
    _, probs = encode_batch(model, _normalized(dataset.images, stats), batch_size)
    return weighted_mean_log_loss(probs, dataset.labels, weights)


def init_head_prior(model, labels):
    """Set the head bias to the log-odds of each class's training prevalence"""
    prevalence = np.clip(np.asarray(labels, dtype=np.float64).mean(axis=0), PRIOR_CLIP, 1.0 - PRIOR_CLIP)
    model.params["head.bias"].data[:] = np.log(prevalence / (1.0 - prevalence))
    logger.info("head bias starts at class log-odds " + ", ".join(f"{b:.2f}" for b in model.params["head.bias"].data))


def train_slice_model(train_set, val_set, config, schedule=CNN_SCHEDULE, rng=None, augment_cfg=None,
                      batch_size=DEFAULT_BATCH_SIZE, weights=DEFAULT_WEIGHTS, stats=DEFAULT_STATS, model=None):
    """
    Adam over shuffled mini-batches, one learning rate per epoch. After each
    epoch the model is scored on val_set by weighted mean log loss and the
    best-scoring parameters are returned. Augmentation, when configured, is
    applied to the windowed image before normalization. A model built here
    starts its head bias at the training prevalence of each class.
    """
    if len(train_set) == 0:
        raise ValidationError("cannot train the slice encoder on an empty training set")
    if batch_size < 1:
        raise ValidationError(f"batch size must be at least 1, got {batch_size}")
    if rng is None:
        raise ValidationError("train_slice_model needs an explicit rng")
    fresh = model is None
    if fresh:
        model = build(config, rng)
    if schedule.epochs == 0:
        logger.info("empty schedule, returning the initialized model")
        return model
    if fresh:
        init_head_prior(model, train_set.labels)
    if len(val_set) == 0:
        logger.warning("validation set is empty, selecting the checkpoint by training loss")

    optimizer = Adam(model.parameters())
    history = model.history
    best_loss, best_state = math.inf, None
    n = len(train_set)
    step = 0

    for epoch, lr in enumerate(schedule.lrs, start=1):
        started = time.perf_counter()
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            images = train_set.images[idx].astype(np.float64)
            if augment_cfg is not None:
                images = np.stack([augment(img, augment_cfg, rng) for img in images])
            x = Tensor(_normalized(images, stats))
            optimizer.zero_grad()
            with Tape() as tape:
                loss = training_loss(forward(model, x), train_set.labels[idx])
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise TrainingDivergedError("slice_encoder", epoch, step, value)
            backward(tape, loss, params=optimizer.params)
            optimizer.step(lr)
            epoch_losses.append(value)
            history.step_losses.append(value)

        train_loss = float(np.mean(epoch_losses))
        val_loss = validation_loss(model, val_set, weights, stats) if len(val_set) else train_loss
        seconds = time.perf_counter() - started
        history.epochs.append(
            {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss, "seconds": seconds}
        )
        logger.info(f"epoch {epoch}/{schedule.epochs} lr={lr:g} train_loss={train_loss:.5f} "
                    f"val_weighted_log_loss={val_loss:.5f} time={seconds:.1f}s")
        if not math.isfinite(val_loss):
            raise TrainingDivergedError("slice_encoder", epoch, step, val_loss)
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.state_dict()
            history.best_epoch = epoch
            logger.info(f"retaining checkpoint from epoch {epoch}")

    model.load_state(best_state, source="best checkpoint")
    return model
