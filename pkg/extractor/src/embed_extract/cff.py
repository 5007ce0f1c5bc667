"""Writer for the CFF1 feature-file format.

This mirrors the consumer's on-disk contract byte for byte (little-endian):

    magic "CFF1" | u32 version=1 | u32 num_classes | u32 feature_dim |
    u64 num_samples | per class: u32 name_len, name bytes (UTF-8) |
    per sample: u32 label, feature_dim x f32

A text-head file is the same layout with num_samples = num_classes and
sample i labeled i.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CFF1"
VERSION = 1


def write_cff(path, class_names, labels, features) -> None:
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ValueError("features must be (n, dim) with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= len(class_names)):
        raise ValueError("labels out of range for the class list")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, len(class_names), features.shape[1]))
        fh.write(struct.pack("<Q", features.shape[0]))
        for name in class_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for label, row in zip(labels, features):
            fh.write(struct.pack("<I", int(label)))
            fh.write(row.tobytes())


def write_text_head(path, class_names, rows) -> None:
    rows = np.asarray(rows, dtype=np.float32)
    if rows.shape[0] != len(class_names):
        raise ValueError("one text row per class required")
    write_cff(path, class_names, np.arange(len(class_names)), rows)
