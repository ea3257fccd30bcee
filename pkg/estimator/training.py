"""
Head-only training with the backbone frozen.

Loss is the batch mean of categorical cross-entropy over softmax outputs.
Gradients are exact backpropagation through the head (dense layers, relu,
inverted dropout, softmax); parameters are updated with Adam.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .augment import Augmenter, sample_rng
from .dataset import TRAIN, VAL, DatasetManifest
from .exceptions import EmptyDatasetError, NumericError, ShapeError
from .imaging import load_image
from .network import CONV, DROPOUT, RELU, SOFTMAX, AgeModel, NetworkSpec, WeightStore
from .tensor_ops import EVAL, Tensor, check_mode, dropout_mask, softmax

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def one_hot(labels: Sequence[int], num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"Labels must lie in 0..{num_classes - 1}")
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def cross_entropy(p, t):
    """
    -sum_c t_c * ln(p_c), with p clamped to >= 1e-12 first.

    Works on one vector (returns a float) or on rows of a batch.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"Probabilities {p.shape} and targets {t.shape} differ")
    loss = -np.sum(t * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)
    return float(loss) if loss.ndim == 0 else loss


def softmax_ce_grad(logits, t) -> Tensor:
    """Gradient of cross_entropy(softmax(logits), t) with respect to the logits."""
    logits = np.asarray(logits)
    t = np.asarray(t)
    if logits.shape != t.shape:
        raise ShapeError(f"Logits {logits.shape} and targets {t.shape} differ")
    p = softmax(logits, axis=-1)
    return p - t.astype(p.dtype)


def _dense_shape(layer) -> Tuple[int, int]:
    p = layer.params
    return p.support * p.support * p.filt_dim, p.num_filts


def draw_dropout_masks(head: NetworkSpec, batch: int, rng: np.random.Generator, dtype=np.float32) -> Dict[str, Tensor]:
    """One inverted-dropout mask per dropout layer for a batch of `batch` samples."""
    masks = {}
    width = int(np.prod(head.input_shape))
    for layer in head.layers:
        if layer.kind == CONV:
            width = layer.params.num_filts
        elif layer.kind == DROPOUT:
            masks[layer.name] = dropout_mask((batch, width), layer.params.rate, rng, dtype)
    return masks


def _head_pass(head, weights, features, mode, rng, masks):
    n = len(features)
    dtype = np.float64 if features.dtype == np.float64 else np.float32
    x = features.reshape(n, -1).astype(dtype)
    tape = []
    probs = None
    for layer in head.layers:
        if layer.kind == CONV:
            d_in, d_out = _dense_shape(layer)
            if x.shape[1] != d_in:
                raise ShapeError(f"Layer {layer.name} expects {d_in} inputs per sample, got {x.shape[1]}")
            w = weights[layer.weight_key].astype(dtype).reshape(d_in, d_out)
            tape.append((layer, x, w))
            x = x @ w + weights[layer.bias_key].astype(dtype)
        elif layer.kind == RELU:
            tape.append((layer, x > 0, None))
            x = np.maximum(x, 0)
        elif layer.kind == DROPOUT:
            if mode == EVAL or layer.params.rate == 0.0:
                continue
            mask = masks.get(layer.name) if masks else None
            if mask is None:
                if rng is None:
                    raise ValueError("train-mode dropout needs masks or a seeded Generator")
                mask = dropout_mask(x.shape, layer.params.rate, rng, dtype)
            mask = np.asarray(mask, dtype=dtype)
            tape.append((layer, mask, None))
            x = x * mask
        elif layer.kind == SOFTMAX:
            probs = softmax(x, axis=-1)
        else:
            raise ShapeError(f"Layer kind {layer.kind} is not supported in a trainable head")
    if probs is None:
        raise ShapeError("Head must end with a softmax layer")
    return probs, tape


def head_loss_and_grads(
    head: NetworkSpec,
    weights: Mapping[str, np.ndarray],
    features: Tensor,
    targets,
    mode: str = "train",
    rng: Optional[np.random.Generator] = None,
    masks: Optional[Dict[str, Tensor]] = None,
) -> Tuple[float, WeightStore]:
    """
    Mean cross-entropy of a batch and its gradient for every head parameter.

    Args:
        head: Head spec (dense layers, relu, dropout, softmax last)
        weights: Head tensors keyed "<layer>.weight" / "<layer>.bias"
        features: (N, ...) frozen-backbone outputs
        targets: (N, C) one-hot rows or N integer labels
        mode: "train" applies dropout, "eval" skips it
        rng: Generator for dropout masks not given in `masks`
        masks: Fixed per-layer dropout masks of shape (N, units)

    Returns:
        (loss, gradients keyed like the weights)
    """
    check_mode(mode)
    features = np.asarray(features)
    n = len(features)
    if n == 0:
        raise ShapeError("Cannot backpropagate an empty batch")
    probs, tape = _head_pass(head, weights, features, mode, rng, masks)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = one_hot(targets, probs.shape[1], probs.dtype)
    if targets.shape != probs.shape:
        raise ShapeError(f"Targets {targets.shape} do not match head output {probs.shape}")
    targets = targets.astype(probs.dtype)

    loss = float(np.mean(cross_entropy(probs, targets)))
    grad = (probs - targets) / n
    grads = {}
    for layer, saved, w in reversed(tape):
        if layer.kind == CONV:
            grads[layer.weight_key] = (saved.T @ grad).reshape(layer.params.weight_shape)
            grads[layer.bias_key] = grad.sum(axis=0)
            grad = grad @ w.T
        else:
            # relu gate or dropout mask
            grad = grad * saved
    return loss, grads


def backward_head(head, weights, features, targets, mode="train", rng=None, masks=None) -> WeightStore:
    """Gradients only; see head_loss_and_grads."""
    return head_loss_and_grads(head, weights, features, targets, mode, rng, masks)[1]


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """
    One Adam update of every parameter that has a gradient.

    Returns new (params, state); the inputs are not modified.
    """
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ShapeError(f"Gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        g = g.astype(theta.dtype)
        m = b1 * new_m.get(name, np.zeros_like(theta)) + (1 - b1) * g
        v = b2 * new_v.get(name, np.zeros_like(theta)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_params[name] = (theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(theta.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.learning_rate, b1, b2, state.epsilon, step, new_m, new_v)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def from_pipeline(cls, config) -> "TrainConfig":
        return cls(config.epochs, config.batch_size, config.seed, config.learning_rate,
                   config.beta1, config.beta2, config.epsilon)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float


def dumps_training_log(stats: Sequence[EpochStats]) -> str:
    """`epoch<TAB>mean_train_loss<TAB>val_exact_acc` per line."""
    return "".join(f"{s.epoch}\t{s.loss:.6f}\t{s.val_accuracy:.6f}\n" for s in stats)


@dataclass
class TrainResult:
    weights: WeightStore
    log: List[EpochStats]


EpochCallback = Callable[[EpochStats, WeightStore], None]


class HeadTrainer:
    """Adam on the trainable head parameters; the backbone never sees a gradient."""

    def __init__(self, head: NetworkSpec, weights: Mapping[str, np.ndarray], config: TrainConfig):
        self.head = head
        self.config = config
        self.params = {name: np.array(weights[name], copy=True) for name in head.trainable_parameter_names()}
        self.state = AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)
        self.dropout_rng = np.random.default_rng([config.seed, 1])

    def run_epoch(self, epoch: int, features: Tensor, labels: np.ndarray) -> float:
        """Shuffle, batch, step; returns the sample-weighted mean loss."""
        n = len(features)
        order = np.random.default_rng([self.config.seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, self.config.batch_size):
            idx = order[start:start + self.config.batch_size]
            loss, grads = head_loss_and_grads(
                self.head, self.params, features[idx], labels[idx], "train", self.dropout_rng
            )
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericError(f"Non-finite loss or gradient in epoch {epoch} (loss {loss})")
            self.params, self.state = adam_step(self.params, grads, self.state)
            total += loss * len(idx)
        return total / n

    def predict(self, features: Tensor) -> np.ndarray:
        if len(features) == 0:
            return np.zeros(0, dtype=np.int64)
        probs, _ = _head_pass(self.head, self.params, np.asarray(features), EVAL, None, None)
        return np.argmax(probs, axis=1)

    def accuracy(self, features: Tensor, labels: np.ndarray) -> float:
        if len(labels) == 0:
            return float("nan")
        return float(np.mean(self.predict(features) == labels))

    def finish_epoch(self, epoch, loss, features, labels, val, on_epoch) -> EpochStats:
        val_acc = self.accuracy(*val) if val is not None else float("nan")
        stats = EpochStats(epoch, loss, self.accuracy(features, labels), val_acc)
        logger.info(
            f"Epoch {epoch}: loss {stats.loss:.4f}, train acc {stats.train_accuracy:.4f}, val acc {stats.val_accuracy:.4f}"
        )
        if on_epoch is not None:
            on_epoch(stats, self.params)
        return stats


def train_on_features(
    head: NetworkSpec,
    weights: Mapping[str, np.ndarray],
    features: Tensor,
    labels: Sequence[int],
    config: TrainConfig,
    val: Optional[Tuple[Tensor, Sequence[int]]] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """Train the head on fixed, precomputed features."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyDatasetError("Training set is empty")
    if val is not None:
        val = (np.asarray(val[0]), np.asarray(val[1], dtype=np.int64))
    trainer = HeadTrainer(head, weights, config)
    log = []
    for epoch in range(1, config.epochs + 1):
        loss = trainer.run_epoch(epoch, features, labels)
        log.append(trainer.finish_epoch(epoch, loss, features, labels, val, on_epoch))
    return TrainResult(trainer.params, log)


def _features_in_batches(model: AgeModel, crops: List[Tensor], batch_size: int) -> Tensor:
    chunks = [model.features(np.stack(crops[i:i + batch_size])) for i in range(0, len(crops), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0,) + model.backbone.output_shape, np.float32)


def train(
    model: AgeModel,
    manifest: DatasetManifest,
    config: TrainConfig,
    augmenter: Optional[Augmenter] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """
    Fine-tune the head of `model` on the manifest's train split.

    Every epoch augments each training image with its own (seed, epoch, index)
    generator and recomputes backbone features; validation features come from
    the deterministic centre view and are computed once.
    """
    train_samples = manifest.subset(TRAIN)
    if not train_samples:
        raise EmptyDatasetError("Manifest has no training samples")
    model.ensure_loaded()
    augmenter = augmenter or Augmenter()

    train_images = [load_image(s.path) for s in train_samples]
    train_labels = np.array([int(s.label) for s in train_samples], dtype=np.int64)

    val_samples = manifest.subset(VAL)
    val = None
    if val_samples:
        views = [augmenter.evaluation_view(load_image(s.path)) for s in val_samples]
        val = (_features_in_batches(model, views, config.batch_size),
               np.array([int(s.label) for s in val_samples], dtype=np.int64))
    logger.info(f"Training head on {len(train_samples)} samples, validating on {len(val_samples)}")

    trainer = HeadTrainer(model.head, model.weights, config)
    log = []
    for epoch in range(1, config.epochs + 1):
        crops = [augmenter(image, sample_rng(config.seed, epoch, i)) for i, image in enumerate(train_images)]
        features = _features_in_batches(model, crops, config.batch_size)
        loss = trainer.run_epoch(epoch, features, train_labels)
        log.append(trainer.finish_epoch(epoch, loss, features, train_labels, val, on_epoch))
    return TrainResult(trainer.params, log)
