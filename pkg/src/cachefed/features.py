"""Labeled feature datasets, the synthetic world generator, and CFF1 files.

Features stand in for the output of a frozen image encoder: unit-norm
float vectors. The generator builds a "world" in feature space — real
train/test sets, a class-balanced synthetic set whose class centers are
angularly perturbed by a controllable domain gap, and a text head that
plays the role of encoded class prompts. Everything is derived
deterministically from the spec seed, and features are quantized to
float32 so that disk round-trips are bit-exact.

CFF1 file layout (little-endian):

    magic "CFF1" | u32 version=1 | u32 num_classes | u32 feature_dim |
    u64 num_samples | per class: u32 name_len, name bytes (UTF-8) |
    per sample: u32 label, feature_dim x f32

A text-head file uses the same layout with num_samples = num_classes and
sample i carrying label i.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import FormatError, LabelError
from .numerics import l2_normalize_rows
from .rng import derive_rng

MAGIC = b"CFF1"
VERSION = 1

DEFAULT_PROMPT_TEMPLATE = "a photo of a [CLASS]"

# Fixed angular perturbation (radians) applied to class centers when
# deriving the text head, so the zero-shot head is informative but not
# oracle-perfect. Small enough that the noiseless world still classifies
# at accuracy 1.0.
TEXT_HEAD_GAP = 0.06


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class names plus the prompt template used for text features."""

    class_names: tuple[str, ...]
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def __post_init__(self):
        if not self.class_names:
            raise ValueError("catalog needs at least one class")
        if any(not n for n in self.class_names):
            raise ValueError("class names must be non-empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        if "[CLASS]" not in self.prompt_template:
            raise ValueError("prompt template must contain the [CLASS] placeholder")

    def __len__(self) -> int:
        return len(self.class_names)

    def prompt_for(self, index: int) -> str:
        return self.prompt_template.replace("[CLASS]", self.class_names[index])


def default_catalog(num_classes: int) -> ClassCatalog:
    width = max(2, len(str(num_classes - 1)))
    return ClassCatalog(tuple(f"class_{i:0{width}d}" for i in range(num_classes)))


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """Unit-norm feature rows with integer labels.

    ``source_tag`` records provenance ("synthetic" or "extracted"); it does
    not travel through CFF1 files and is excluded from equality.
    """

    features: np.ndarray  # (n, C) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int
    source_tag: str = "synthetic"

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be one per feature row")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite entries")
        if labels.size:
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise LabelError(
                    f"labels must lie in [0, {self.num_classes}), got "
                    f"[{labels.min()}, {labels.max()}]"
                )
            norms = np.linalg.norm(feats, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("feature rows must be unit-norm within 1e-6")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class TextHead:
    """Per-class text-feature rows, aligned with catalog order."""

    weights: np.ndarray  # (num_classes, C) float64

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError(f"text head must be (num_classes, C), got {w.shape}")
        norms = np.linalg.norm(w, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("text head rows must be unit-norm within 1e-6")
        object.__setattr__(self, "weights", w)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TextHead):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic feature-space world.

    ``class_separation`` scales the class-specific component of each
    center relative to a shared direction (small values crowd the classes
    onto a spherical cap). ``domain_gap`` is the angle in radians by which
    synthetic class centers are rotated away from the real ones.
    ``train_per_class``/``test_per_class`` size the real splits; the
    synthetic split always has exactly ``shots_per_class`` per class.
    """

    num_classes: int
    shots_per_class: int
    feature_dim: int
    class_separation: float = 0.2
    noise_scale: float = 0.05
    domain_gap: float = 0.2
    seed: int = 0
    train_per_class: int = 128
    test_per_class: int = 100

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.shots_per_class < 1:
            raise ValueError("need at least 1 shot per class")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.class_separation < 0 or self.noise_scale < 0 or self.domain_gap < 0:
            raise ValueError("class_separation, noise_scale, domain_gap must be >= 0")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("train_per_class and test_per_class must be >= 1")


class World(NamedTuple):
    real_train: FeatureDataset
    real_test: FeatureDataset
    synthetic_balanced: FeatureDataset
    text_head: TextHead


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _rotate_towards(center: np.ndarray, direction: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a unit vector by `angle` toward the part of `direction` orthogonal to it."""
    if angle == 0.0:
        return center.copy()
    ortho = direction - (direction @ center) * center
    norm = np.linalg.norm(ortho)
    if norm < 1e-12:  # direction parallel to center; nothing to rotate toward
        return center.copy()
    return np.cos(angle) * center + np.sin(angle) * (ortho / norm)


def _quantize(features: np.ndarray) -> np.ndarray:
    # Features are stored as f32 on disk; quantizing here makes the file
    # round-trip bit-exact.
    return features.astype(np.float32).astype(np.float64)


def _noisy_samples(
    centers: np.ndarray,
    labels: np.ndarray,
    noise_scale: float,
    class_dirs: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    # Noise lives in the span of the class directions: it moves samples
    # across class boundaries instead of spending norm on directions no
    # classifier cares about.
    points = centers[labels]
    if noise_scale > 0.0:
        z = rng.standard_normal((points.shape[0], class_dirs.shape[0]))
        points = points + noise_scale * (z @ class_dirs)
    return _quantize(l2_normalize_rows(points))


def generate_world(spec: SynthSpec) -> World:
    """Build real train/test sets, a balanced synthetic set, and a text head.

    Class centers live on the unit sphere: a shared direction plus
    ``class_separation`` times a per-class direction, normalized. Real
    samples are centers plus isotropic Gaussian noise, renormalized.
    Synthetic centers are the real ones rotated by ``domain_gap`` radians
    toward per-class random orthogonal directions, so domain_gap = 0 means
    synthetic and real share centers. The text head rotates the real
    centers by the fixed TEXT_HEAD_GAP angle. Identical specs produce
    bit-identical worlds.
    """
    n_cls, dim = spec.num_classes, spec.feature_dim

    rng_centers = derive_rng(spec.seed, "world-centers")
    shared = _unit(rng_centers.standard_normal(dim))
    class_dirs = rng_centers.standard_normal((n_cls, dim))
    class_dirs = l2_normalize_rows(class_dirs)
    centers = l2_normalize_rows(shared[None, :] + spec.class_separation * class_dirs)

    # The domain gap rotates each synthetic center inside the span of the
    # class directions: a bias that confuses classes with each other, which
    # is exactly what local fine-tuning can undo.
    rng_domain = derive_rng(spec.seed, "world-domain")
    synth_centers = np.stack(
        [
            _rotate_towards(
                centers[c],
                _unit(rng_domain.standard_normal(n_cls) @ class_dirs),
                spec.domain_gap,
            )
            for c in range(n_cls)
        ]
    )

    rng_text = derive_rng(spec.seed, "world-text")
    text_rows = np.stack(
        [
            _rotate_towards(
                centers[c],
                _unit(rng_text.standard_normal(n_cls) @ class_dirs),
                TEXT_HEAD_GAP,
            )
            for c in range(n_cls)
        ]
    )
    text_head = TextHead(_quantize(l2_normalize_rows(text_rows)))

    def balanced_labels(per_class: int) -> np.ndarray:
        return np.repeat(np.arange(n_cls, dtype=np.int64), per_class)

    rng_train = derive_rng(spec.seed, "world-train")
    train_labels = balanced_labels(spec.train_per_class)
    train_labels = train_labels[rng_train.permutation(train_labels.shape[0])]
    train = FeatureDataset(
        _noisy_samples(centers, train_labels, spec.noise_scale, class_dirs, rng_train),
        train_labels,
        n_cls,
        source_tag="synthetic",
    )

    rng_test = derive_rng(spec.seed, "world-test")
    test_labels = balanced_labels(spec.test_per_class)
    test_labels = test_labels[rng_test.permutation(test_labels.shape[0])]
    test = FeatureDataset(
        _noisy_samples(centers, test_labels, spec.noise_scale, class_dirs, rng_test),
        test_labels,
        n_cls,
        source_tag="synthetic",
    )

    rng_synth = derive_rng(spec.seed, "world-synth")
    synth_labels = balanced_labels(spec.shots_per_class)  # class-major order
    synthetic = FeatureDataset(
        _noisy_samples(synth_centers, synth_labels, spec.noise_scale, class_dirs, rng_synth),
        synth_labels,
        n_cls,
        source_tag="synthetic",
    )

    return World(train, test, synthetic, text_head)


# ---------------------------------------------------------------------------
# CFF1 serialization


def write_features(path, dataset: FeatureDataset, catalog: ClassCatalog) -> None:
    """Write a dataset and its catalog as a CFF1 file."""
    if len(catalog) != dataset.num_classes:
        raise ValueError(
            f"catalog has {len(catalog)} classes, dataset expects {dataset.num_classes}"
        )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, dataset.num_classes, dataset.feature_dim))
        fh.write(struct.pack("<Q", len(dataset)))
        for name in catalog.class_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        feats32 = dataset.features.astype(np.float32)
        for label, row in zip(dataset.labels, feats32):
            fh.write(struct.pack("<I", int(label)))
            fh.write(row.tobytes())


class _Reader:
    """Byte-counting reader so format errors can name an exact offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def read_features(path, source_tag: str = "extracted") -> tuple[FeatureDataset, ClassCatalog]:
    """Parse a CFF1 file back into a dataset and catalog.

    Features are widened to float64. The file format does not carry a
    provenance tag, so the caller supplies one (default "extracted").
    """
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())

    start = reader.pos
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", start)
    version_at = reader.pos
    version = reader.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", version_at)
    num_classes = reader.u32("num_classes")
    if num_classes == 0:
        raise FormatError("num_classes must be positive", reader.pos - 4)
    feature_dim = reader.u32("feature_dim")
    if feature_dim == 0:
        raise FormatError("feature_dim must be positive", reader.pos - 4)
    num_samples = reader.u64("num_samples")

    names = []
    for i in range(num_classes):
        length = reader.u32(f"class {i} name length")
        raw = reader.take(length, f"class {i} name")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"class {i} name is not valid UTF-8", reader.pos - length) from exc
    try:
        catalog = ClassCatalog(tuple(names))
    except ValueError as exc:
        raise FormatError(f"invalid class catalog: {exc}", reader.pos) from exc

    labels = np.empty(num_samples, dtype=np.int64)
    rows = np.empty((num_samples, feature_dim), dtype=np.float32)
    row_bytes = 4 * feature_dim
    for i in range(num_samples):
        label_at = reader.pos
        label = reader.u32(f"sample {i} label")
        if label >= num_classes:
            raise FormatError(
                f"sample {i} label {label} out of range [0, {num_classes})", label_at
            )
        labels[i] = label
        rows[i] = np.frombuffer(reader.take(row_bytes, f"sample {i} features"), dtype="<f4")
    if reader.pos != len(reader.data):
        raise FormatError("trailing bytes after last sample", reader.pos)

    dataset = FeatureDataset(
        rows.astype(np.float64), labels, num_classes, source_tag=source_tag
    )
    return dataset, catalog


def write_text_head(path, head: TextHead, catalog: ClassCatalog) -> None:
    """Write a text head as a CFF1 file with one row per class, label i = i."""
    dataset = FeatureDataset(
        head.weights,
        np.arange(head.num_classes, dtype=np.int64),
        head.num_classes,
        source_tag="extracted",
    )
    write_features(path, dataset, catalog)


def read_text_head(path) -> tuple[TextHead, ClassCatalog]:
    dataset, catalog = read_features(path)
    if len(dataset) != dataset.num_classes:
        raise FormatError(
            f"text head must have num_samples == num_classes, got {len(dataset)} rows "
            f"for {dataset.num_classes} classes",
            0,
        )
    if not np.array_equal(dataset.labels, np.arange(dataset.num_classes)):
        raise FormatError("text head labels must be 0..num_classes-1 in order", 0)
    return TextHead(dataset.features), catalog
