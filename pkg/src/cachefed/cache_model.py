"""Key-value cache adapter over a frozen zero-shot head.

The adapter holds a trainable key matrix (one cached feature vector per
column) and a frozen one-hot value matrix. For a batch of query features
X (batch x C), a text head W_t (classes x C), keys W1 (C x M) and values
W2 (classes x M):

    zero_shot = X W_t^T
    adapter   = exp(-beta (1 - X W1)) W2^T
    fused     = zero_shot + alpha * adapter

Training updates only W1 by SGD on the cross-entropy of softmax(fused);
W2, the text head, alpha and beta stay constant. The exact gradient, with
A = exp(-beta (1 - X W1)) and D = (softmax(fused) - onehot(y)) / batch:

    dL/dW1 = X^T (beta * A ⊙ (alpha * D W2))

Checkpoint format CFM1 (little-endian): magic "CFM1" | u32 version=1 |
u32 C | u32 M | u32 num_classes | f64 alpha | f64 beta | W1 as C*M f64
row-major | M x u32 value labels (one-hot reconstructed on load).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import BalanceError, DegenerateInputError, FormatError, ShapeError
from .features import FeatureDataset, TextHead
from .numerics import cross_entropy, matmul, one_hot, softmax_rows
from .rng import derive_rng

CHECKPOINT_MAGIC = b"CFM1"
CHECKPOINT_VERSION = 1

DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 1.0


@dataclass(frozen=True, eq=False)
class CacheModel:
    """Trainable keys, frozen one-hot values, and fusion hyperparameters."""

    keys: np.ndarray  # W1: (C, M) float64
    values: np.ndarray  # W2: (num_classes, M) float64, exactly one-hot columns
    alpha: float
    beta: float

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=np.float64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if keys.ndim != 2 or values.ndim != 2:
            raise ShapeError("keys and values must be 2-D")
        if keys.shape[1] != values.shape[1]:
            raise ShapeError(
                f"keys have {keys.shape[1]} columns but values have {values.shape[1]}"
            )
        is_zero_or_one = (values == 0.0) | (values == 1.0)
        if not is_zero_or_one.all() or not ((values == 1.0).sum(axis=0) == 1).all():
            raise ValueError("every value column must be exactly one-hot")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)

    @property
    def feature_dim(self) -> int:
        return self.keys.shape[0]

    @property
    def num_cached(self) -> int:
        return self.keys.shape[1]

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    def value_labels(self) -> np.ndarray:
        return self.values.argmax(axis=0).astype(np.int64)


@dataclass(frozen=True)
class LogitsBundle:
    zero_shot: np.ndarray
    adapter: np.ndarray
    fused: np.ndarray


def init_cache(
    balanced: FeatureDataset, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA
) -> CacheModel:
    """Build the cache from an exactly class-balanced dataset.

    Key column j is sample j's feature vector; value column j is the
    one-hot of its label. Column order follows dataset order.
    """
    counts = balanced.class_counts()
    if counts.min() != counts.max():
        raise BalanceError(
            "cache construction needs an exactly class-balanced dataset",
            counts={int(c): int(n) for c, n in enumerate(counts)},
        )
    keys = balanced.features.T.copy()
    values = one_hot(balanced.labels, balanced.num_classes)
    return CacheModel(keys=keys, values=values, alpha=alpha, beta=beta)


def random_cache(
    num_classes: int,
    shots_per_class: int,
    feature_dim: int,
    seed: int,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> CacheModel:
    """Cache with random unit-norm keys and the usual class-major value layout.

    This is the "no synthetic data" baseline: same shape as init_cache
    output, but the keys carry no information about the classes.
    """
    rng = derive_rng(seed, "random-cache")
    keys = rng.standard_normal((feature_dim, num_classes * shots_per_class))
    keys /= np.linalg.norm(keys, axis=0, keepdims=True)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), shots_per_class)
    return CacheModel(keys=keys, values=one_hot(labels, num_classes), alpha=alpha, beta=beta)


def _check_batch(model: CacheModel, text_head: TextHead, batch: np.ndarray) -> None:
    if batch.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {batch.shape}")
    if batch.shape[1] != model.feature_dim:
        raise ShapeError(
            f"batch feature dim {batch.shape[1]} != cache feature dim {model.feature_dim}"
        )
    if text_head.feature_dim != model.feature_dim:
        raise ShapeError(
            f"text head dim {text_head.feature_dim} != cache feature dim {model.feature_dim}"
        )
    if text_head.num_classes != model.num_classes:
        raise ShapeError(
            f"text head has {text_head.num_classes} classes, cache has {model.num_classes}"
        )


def affinity(model: CacheModel, batch: np.ndarray) -> np.ndarray:
    """exp(-beta (1 - X W1)): per-query similarity weight for each cached column."""
    return np.exp(-model.beta * (1.0 - matmul(batch, model.keys)))


def compute_logits(model: CacheModel, text_head: TextHead, batch: np.ndarray) -> LogitsBundle:
    """Zero-shot, adapter, and fused logits for a batch of features."""
    _check_batch(model, text_head, batch)
    zero_shot = matmul(batch, text_head.weights.T)
    adapter = matmul(affinity(model, batch), model.values.T)
    fused = zero_shot + model.alpha * adapter
    return LogitsBundle(zero_shot=zero_shot, adapter=adapter, fused=fused)


def loss_and_grad_w1(
    model: CacheModel, text_head: TextHead, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the fused logits and its exact gradient w.r.t. the keys."""
    _check_batch(model, text_head, batch)
    labels = np.asarray(labels, dtype=np.int64)
    aff = affinity(model, batch)
    zero_shot = matmul(batch, text_head.weights.T)
    fused = zero_shot + model.alpha * matmul(aff, model.values.T)
    probs = softmax_rows(fused)
    loss = cross_entropy(probs, labels)

    d_fused = probs.copy()
    d_fused[np.arange(labels.shape[0]), labels] -= 1.0
    d_fused /= labels.shape[0]
    d_aff = model.alpha * matmul(d_fused, model.values)
    grad = matmul(batch.T, model.beta * aff * d_aff)
    return loss, grad


def sgd_step(model: CacheModel, grad_w1: np.ndarray, lr: float) -> CacheModel:
    """One gradient step on the keys; values and hyperparameters are untouched."""
    if grad_w1.shape != model.keys.shape:
        raise ShapeError(f"gradient shape {grad_w1.shape} != keys shape {model.keys.shape}")
    # replace() shares the values array, so the frozen W2 is bitwise identical.
    return replace(model, keys=model.keys - lr * grad_w1)


def predict(model: CacheModel, text_head: TextHead, batch: np.ndarray) -> np.ndarray:
    """Fused-logits argmax per row; ties break to the lowest class index."""
    return compute_logits(model, text_head, batch).fused.argmax(axis=1)


def evaluate(model: CacheModel, text_head: TextHead, test: FeatureDataset) -> float:
    """Fraction of test samples whose fused-logits argmax matches the label."""
    if len(test) == 0:
        raise DegenerateInputError("cannot evaluate on an empty test set")
    predictions = predict(model, text_head, test.features)
    return float((predictions == test.labels).mean())


def save_checkpoint(path, model: CacheModel) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIII",
                CHECKPOINT_VERSION,
                model.feature_dim,
                model.num_cached,
                model.num_classes,
            )
        )
        fh.write(struct.pack("<dd", model.alpha, model.beta))
        fh.write(model.keys.astype("<f8").tobytes())
        fh.write(model.value_labels().astype("<u4").tobytes())


def load_checkpoint(path) -> CacheModel:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        out = data[pos : pos + n]
        pos += n
        return out

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    version, dim, cached, num_classes = struct.unpack("<IIII", take(16, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    alpha, beta = struct.unpack("<dd", take(16, "alpha/beta"))
    keys = np.frombuffer(take(8 * dim * cached, "keys"), dtype="<f8").reshape(dim, cached)
    labels_at = pos
    labels = np.frombuffer(take(4 * cached, "value labels"), dtype="<u4").astype(np.int64)
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload", pos)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(
            f"value label {labels.max()} out of range [0, {num_classes})", labels_at
        )
    return CacheModel(
        keys=keys.copy(), values=one_hot(labels, num_classes), alpha=alpha, beta=beta
    )
