"""Image and text encoders behind a common interface.

Two families are available:

* ``proj-<dim>`` (default ``proj-64``): a self-contained deterministic
  encoder. Images are resized to a fixed grid and pushed through a frozen
  random projection; prompts are encoded as sums of per-token hash
  embeddings. No downloaded weights, bit-stable across runs, useful for
  wiring tests and air-gapped environments.
* ``hf:<model>`` (e.g. ``hf:openai/clip-vit-base-patch32``): a pretrained
  vision-language model through the transformers library. Requires the
  weights to be available locally or downloadable.

All encoders return unit-norm float32 rows.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image


class EncoderUnavailable(RuntimeError):
    """The requested encoder cannot be constructed in this environment."""


def _seed_from(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return m / norms


class ProjectionEncoder:
    """Deterministic random-projection encoder.

    Images: RGB, resized to a fixed 16x16 grid with bilinear resampling,
    flattened to 768 values in [0, 1], centered, then projected by a
    frozen Gaussian matrix keyed on the encoder name. Prompts: each
    whitespace token contributes a hash-keyed Gaussian embedding; the sum
    is normalized.
    """

    grid = 16

    def __init__(self, name: str, dim: int):
        self.name = name
        self.dim = dim
        rng = np.random.Generator(np.random.PCG64(_seed_from(f"{name}/image")))
        raw_dim = self.grid * self.grid * 3
        self._image_proj = rng.standard_normal((raw_dim, dim)) / np.sqrt(raw_dim)

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        raws = []
        for image in images:
            small = image.convert("RGB").resize((self.grid, self.grid), Image.BILINEAR)
            raws.append(np.asarray(small, dtype=np.float64).reshape(-1) / 255.0)
        raw = np.stack(raws) - 0.5
        return _normalize_rows(raw @ self._image_proj).astype(np.float32)

    def _token_embedding(self, token: str) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(_seed_from(f"{self.name}/token/{token}")))
        return rng.standard_normal(self.dim)

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        rows = []
        for prompt in prompts:
            tokens = [t for t in prompt.lower().split() if t]
            total = np.zeros(self.dim)
            for token in tokens:
                total += self._token_embedding(token)
            rows.append(total)
        return _normalize_rows(np.stack(rows)).astype(np.float32)


class HuggingFaceClipEncoder:
    """CLIP-style encoder via transformers; needs locally available weights."""

    def __init__(self, model_name: str, batch_size: int = 16):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderUnavailable(f"transformers/torch not installed: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_name)
            self._processor = CLIPProcessor.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderUnavailable(
                f"could not load weights for {model_name!r}; they must be cached "
                f"locally or reachable: {exc}"
            ) from exc
        self._torch = torch
        self._model.eval()
        self.name = model_name
        self.dim = self._model.config.projection_dim
        self.batch_size = batch_size

    def encode_images(self, images):
        chunks = []
        with self._torch.no_grad():
            for start in range(0, len(images), self.batch_size):
                inputs = self._processor(
                    images=images[start : start + self.batch_size], return_tensors="pt"
                )
                feats = self._model.get_image_features(**inputs)
                chunks.append(feats.numpy())
        return _normalize_rows(np.concatenate(chunks)).astype(np.float32)

    def encode_texts(self, prompts):
        with self._torch.no_grad():
            inputs = self._processor(text=prompts, return_tensors="pt", padding=True)
            feats = self._model.get_text_features(**inputs)
        return _normalize_rows(feats.numpy()).astype(np.float32)


def resolve_encoder(name: str, batch_size: int = 16):
    if name.startswith("proj-"):
        try:
            dim = int(name.split("-", 1)[1])
        except ValueError as exc:
            raise EncoderUnavailable(f"bad projection encoder name {name!r}") from exc
        if dim < 2:
            raise EncoderUnavailable("projection dimension must be >= 2")
        return ProjectionEncoder(name, dim)
    if name.startswith("hf:"):
        return HuggingFaceClipEncoder(name[3:], batch_size=batch_size)
    raise EncoderUnavailable(
        f"unknown encoder {name!r}; expected proj-<dim> or hf:<model-name>"
    )
