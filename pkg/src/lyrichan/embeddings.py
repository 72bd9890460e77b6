"""Word embedding matrix: GloVe text loading and trainable lookup."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, default_dtype, take
from .corpus import PAD_ID, ConfigurationError, Vocabulary

logger = logging.getLogger(__name__)

OOV_SCALE = 0.05


class GloveParseError(ValueError):
    """A malformed line in a GloVe vector file."""


@dataclass
class EmbeddingMatrix:
    """``matrix`` is (V, d); row 0 is the PAD vector and stays zero."""

    matrix: Tensor
    trainable: bool = True
    coverage: float = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    def rezero_pad(self) -> None:
        self.matrix.data[PAD_ID] = 0.0


def random_embeddings(vocab_size: int, dim: int, rng: np.random.Generator,
                      trainable: bool = True, dtype=None) -> EmbeddingMatrix:
    """Uniform(-0.05, 0.05) rows with a zero PAD row."""
    dtype = dtype or default_dtype()
    data = rng.uniform(-OOV_SCALE, OOV_SCALE, size=(vocab_size, dim)).astype(dtype)
    data[PAD_ID] = 0.0
    return EmbeddingMatrix(Tensor(data, requires_grad=trainable, dtype=dtype), trainable, 0.0)


def load_glove(path: str | Path, vocab: Vocabulary, dim: int, seed: int = 0,
               trainable: bool = True, dtype=None) -> EmbeddingMatrix:
    """Build an embedding matrix from a GloVe text file.

    Tokens missing from the file (and UNK) keep their uniform(-0.05, 0.05)
    initialisation drawn from ``seed``. ``coverage`` is the fraction of
    non-reserved vocabulary tokens found in the file.
    """
    emb = random_embeddings(len(vocab), dim, np.random.default_rng(seed), trainable, dtype)
    data = emb.matrix.data
    found: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if len(parts) < 2:
                if not line.strip():
                    continue
                raise GloveParseError(f"{path}:{lineno}: expected 'token v1 ... vd'")
            token, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ConfigurationError(
                    f"{path}:{lineno}: vector has {len(values)} components, expected {dim}")
            try:
                vector = np.array([float(v) for v in values])
            except ValueError:
                raise GloveParseError(f"{path}:{lineno}: non-numeric component") from None
            if token in vocab:
                idx = vocab.id(token)
                data[idx] = vector
                found.add(token)
    n_real = len(vocab) - 2
    emb.coverage = len(found) / n_real if n_real else 0.0
    logger.info("GloVe coverage %.4f (%d of %d tokens)", emb.coverage, len(found), n_real)
    return emb


def lookup(emb: EmbeddingMatrix, ids) -> Tensor:
    """Gather embedding rows for integer ``ids`` of any shape -> (..., d)."""
    return take(emb.matrix, ids)
