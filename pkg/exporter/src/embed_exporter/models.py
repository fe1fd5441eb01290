"""Encoder backends behind one interface.

Two families of model identifier:

* ``hash-<dim>`` — a dependency-free deterministic encoder (feature hashing
  for text, a fixed random projection of a downsampled pixel grid for
  images). Bit-reproducible and offline; meant for tests, CI, and dry runs.
* anything else — treated as a sentence-transformers model id (for example
  ``clip-ViT-B-32``), loaded lazily so the import cost and the network are
  only touched when a real model is requested.

Vectors are returned unnormalized; the engine's cosine handles norms.
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

_HASH_ID = re.compile(r"^hash-(\d+)$")


class ModelLoadError(RuntimeError):
    """The requested model identifier cannot be loaded."""


class Encoder(Protocol):
    model_id: str
    dim: int

    def encode_texts(self, texts: Sequence[str], batch_size: int) -> np.ndarray: ...

    def encode_image(self, path: Path) -> np.ndarray: ...


class HashingEncoder:
    """Deterministic stand-in encoder with a CLIP-shaped interface."""

    _GRID = 16  # images are downsampled to GRID x GRID RGB before projection

    def __init__(self, dim: int, model_id: str):
        if dim <= 0:
            raise ModelLoadError(f"hash encoder dim must be positive, got {dim}")
        self.dim = dim
        self.model_id = model_id
        rng = np.random.default_rng(dim)  # projection fixed per dimensionality
        self._projection = rng.normal(size=(self._GRID * self._GRID * 3, dim)).astype(
            np.float32
        )

    def _bucket(self, token: str) -> tuple[int, float]:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        index = int.from_bytes(digest[:8], "little") % self.dim
        sign = 1.0 if digest[8] & 1 else -1.0
        return index, sign

    def encode_texts(self, texts: Sequence[str], batch_size: int) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        bias_index, _ = self._bucket("__bias__")
        for row, text in enumerate(texts):
            tokens = re.findall(r"[a-z0-9]+", text.lower())
            for token in tokens:
                index, sign = self._bucket(token)
                out[row, index] += sign
            for a, b in zip(tokens, tokens[1:]):
                index, sign = self._bucket(a + " " + b)
                out[row, index] += 0.5 * sign
            out[row, bias_index] += 0.25  # keeps empty text off zero norm
        return out

    def encode_image(self, path: Path) -> np.ndarray:
        from PIL import Image

        with Image.open(path) as img:
            pixels = img.convert("RGB").resize((self._GRID, self._GRID))
            flat = np.asarray(pixels, dtype=np.float32).reshape(-1) / 255.0
        return (flat + 0.01) @ self._projection


class SentenceTransformerEncoder:
    """Real dual-encoder backend (CLIP variants and friends)."""

    def __init__(self, model_id: str, device: str | None = None):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise ModelLoadError(f"sentence-transformers not installed: {exc}") from exc
        try:
            self._model = SentenceTransformer(model_id, device=device)
        except Exception as exc:
            raise ModelLoadError(f"cannot load model {model_id!r}: {exc}") from exc
        self.model_id = model_id
        self.dim = int(self._model.get_sentence_embedding_dimension() or 0)
        if self.dim <= 0:
            probe = self._model.encode(["probe"], convert_to_numpy=True)
            self.dim = int(probe.shape[1])

    def encode_texts(self, texts: Sequence[str], batch_size: int) -> np.ndarray:
        return np.asarray(
            self._model.encode(
                list(texts),
                batch_size=batch_size,
                convert_to_numpy=True,
                normalize_embeddings=False,
                show_progress_bar=False,
            ),
            dtype=np.float32,
        )

    def encode_image(self, path: Path) -> np.ndarray:
        from PIL import Image

        with Image.open(path) as img:
            vec = self._model.encode([img.convert("RGB")], convert_to_numpy=True)
        return np.asarray(vec[0], dtype=np.float32)


def load_model(model_id: str, device: str | None = None) -> Encoder:
    match = _HASH_ID.match(model_id)
    if match:
        return HashingEncoder(dim=int(match.group(1)), model_id=model_id)
    return SentenceTransformerEncoder(model_id, device=device)
