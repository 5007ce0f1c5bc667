"""Walk an image directory tree and emit CFF1 feature and text-head files.

The root directory holds one subdirectory per class; subdirectory names
become the class catalog in sorted order. Every image is encoded to a
unit-norm feature row; class-name prompts go through the text encoder to
form the text head. Unreadable images are skipped with a manifest entry
rather than aborting; an entirely empty class is a hard error.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .cff import write_cff, write_text_head
from .encoders import resolve_encoder

log = logging.getLogger("embed_extract")

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

DEFAULT_TEMPLATE = "a photo of a [CLASS]"


@dataclass
class ExtractJob:
    root: str
    out_prefix: str
    encoder: str = "proj-64"
    template: str = DEFAULT_TEMPLATE
    batch_size: int = 16

    def __post_init__(self):
        if "[CLASS]" not in self.template:
            raise ValueError("template must contain the [CLASS] placeholder")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ExtractResult:
    features_path: str
    text_path: str
    manifest_path: str
    class_names: list[str]
    num_samples: int
    skipped: list[dict] = field(default_factory=list)


def _class_directories(root: str) -> list[str]:
    entries = [
        name
        for name in sorted(os.listdir(root))
        if os.path.isdir(os.path.join(root, name)) and not name.startswith(".")
    ]
    if not entries:
        raise ValueError(f"no class subdirectories under {root}")
    return entries


def _image_paths(class_dir: str) -> list[str]:
    return [
        os.path.join(class_dir, name)
        for name in sorted(os.listdir(class_dir))
        if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS
    ]


def extract(job: ExtractJob) -> ExtractResult:
    """Encode every readable image and the class prompts; write three files."""
    encoder = resolve_encoder(job.encoder, batch_size=job.batch_size)
    class_names = _class_directories(job.root)

    labels: list[int] = []
    rows: list[np.ndarray] = []
    skipped: list[dict] = []
    for label, name in enumerate(class_names):
        class_dir = os.path.join(job.root, name)
        paths = _image_paths(class_dir)
        images, kept_paths = [], []
        for path in paths:
            try:
                with Image.open(path) as img:
                    images.append(img.convert("RGB"))
                kept_paths.append(path)
            except Exception as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped.append({"path": path, "reason": str(exc)})
        if not images:
            raise ValueError(f"class {name!r} has no readable images")
        for start in range(0, len(images), job.batch_size):
            batch = images[start : start + job.batch_size]
            rows.append(encoder.encode_images(batch))
            labels.extend([label] * len(batch))

    features = np.concatenate(rows)
    prompts = [job.template.replace("[CLASS]", name) for name in class_names]
    text_rows = encoder.encode_texts(prompts)

    features_path = f"{job.out_prefix}.features.cff"
    text_path = f"{job.out_prefix}.text.cff"
    manifest_path = f"{job.out_prefix}.manifest.json"
    write_cff(features_path, class_names, np.array(labels), features)
    write_text_head(text_path, class_names, text_rows)

    manifest = {
        "encoder": job.encoder,
        "template": job.template,
        "feature_dim": int(features.shape[1]),
        "num_samples": int(features.shape[0]),
        "classes": class_names,
        "counts": {name: int((np.array(labels) == i).sum()) for i, name in enumerate(class_names)},
        "skipped": skipped,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return ExtractResult(
        features_path=features_path,
        text_path=text_path,
        manifest_path=manifest_path,
        class_names=class_names,
        num_samples=int(features.shape[0]),
        skipped=skipped,
    )
