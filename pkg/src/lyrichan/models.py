"""The six genre classifiers and their checkpoint container.

``han-l`` / ``han-s``  hierarchical attention network over lines / segments
``hn-l``               the same hierarchy with attention replaced by averaging
``lstm``               LSTM over the flattened song with max-pooling
``lr``                 logistic regression on the mean word vector
``mc``                 majority-class constant predictor

Every model maps a collated batch to logits ``(B, C)``; probabilities are the
softmax of those logits.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import PAD_ID, Song, Vocabulary
from .embeddings import EmbeddingMatrix, lookup, random_embeddings
from .layers import (AttentionParams, GruParams, attention, bidirectional_gru, dropout,
                     glorot, mean_pool, zeros)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mc", "lr", "lstm", "hn-l", "han-l", "han-s")
HIERARCHICAL = ("hn-l", "han-l", "han-s")


class EmptySongError(ValueError):
    """A song without any token reached a model."""


@dataclass
class ModelConfig:
    """Architecture settings shared by all models.

    ``max_units``/``max_words`` default to 60 lines x 10 words at line
    granularity and 10 segments x 60 words at segment granularity.
    """

    arch: str
    n_classes: int
    vocab_size: int
    embed_dim: int = 100
    hidden_size: int = 50
    attention_size: int = 100
    granularity: str | None = None
    max_units: int | None = None
    max_words: int | None = None
    max_seq_len: int = 600
    segment_breaks: bool = True
    trainable_embeddings: bool = True

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown model type {self.arch!r}; choose from {ARCHITECTURES}")
        if self.granularity is None:
            self.granularity = "segment" if self.arch == "han-s" else "line"
        if self.granularity not in ("line", "segment"):
            raise ValueError(f"granularity must be 'line' or 'segment', got {self.granularity!r}")
        if self.max_units is None:
            self.max_units = 60 if self.granularity == "line" else 10
        if self.max_words is None:
            self.max_words = 10 if self.granularity == "line" else 60
        for name in ("n_classes", "vocab_size", "embed_dim", "hidden_size", "attention_size",
                     "max_units", "max_words", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Backwards-friendly name for the hierarchical settings.
HanConfig = ModelConfig


def predict(p) -> int:
    """Index of the largest entry; ties go to the lowest class id."""
    return int(np.argmax(np.asarray(p)))


# -- batches --------------------------------------------------------------------------

@dataclass
class HierBatch:
    ids: np.ndarray        # (B, U, W) token ids
    word_mask: np.ndarray  # (B, U, W)
    unit_mask: np.ndarray  # (B, U) units that exist, including segment breaks
    labels: np.ndarray     # (B,)


@dataclass
class SeqBatch:
    ids: np.ndarray   # (B, T)
    mask: np.ndarray  # (B, T)
    labels: np.ndarray


def song_units(song: Song, granularity: str, segment_breaks: bool = True) -> list[list[int]]:
    """Units of a song: lines (with an empty unit between segments) or whole segments."""
    if granularity == "segment":
        return [[tok for line in seg for tok in line] for seg in song.segments]
    units: list[list[int]] = []
    for i, seg in enumerate(song.segments):
        if i and segment_breaks:
            units.append([])
        units.extend(seg)
    return units


def song_unit_tokens(song: Song, granularity: str, segment_breaks: bool = True
                     ) -> list[list[str]]:
    """Token strings laid out like :func:`song_units`."""
    if song.tokens is None:
        raise ValueError("song carries no token strings")
    shadow = Song(segments=song.tokens, genre_id=song.genre_id)
    return song_units(shadow, granularity, segment_breaks)


def _labels(songs: Sequence[Song]) -> np.ndarray:
    return np.array([s.genre_id for s in songs], dtype=np.int64)


# -- base -----------------------------------------------------------------------------

class Model:
    """Common parameter bookkeeping; subclasses implement ``prepare``/``collate``/``logits``."""

    arch = ""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self.embedding: EmbeddingMatrix | None = None

    # parameters
    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if v.requires_grad}

    def n_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for name, value in state.items():
            target = self._params[name]
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
            target.data[...] = value

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def after_step(self) -> None:
        if self.embedding is not None:
            self.embedding.rezero_pad()

    def _register(self, prefix: str, tensors: dict[str, Tensor]) -> None:
        for name, t in tensors.items():
            self._params[f"{prefix}.{name}" if prefix else name] = t

    def _embed(self, ids, dropout_p: float, rng) -> Tensor:
        return dropout(lookup(self.embedding, ids), dropout_p, dropout_p > 0, rng)

    # data
    def prepare(self, songs: Sequence[Song]) -> list:
        return list(songs)

    def collate(self, items: Sequence) -> Any:
        raise NotImplementedError

    def batch(self, songs: Sequence[Song]):
        return self.collate(self.prepare(songs))

    # inference
    def logits(self, batch, dropout_p: float = 0.0, rng=None) -> Tensor:
        raise NotImplementedError

    def predict_proba(self, batch) -> np.ndarray:
        return ad.softmax(self.logits(batch)).data

    def predict_batch(self, batch) -> np.ndarray:
        return np.argmax(self.predict_proba(batch), axis=1)


class MajorityClassifier(Model):
    arch = "mc"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.majority_id = 0

    def fit(self, songs: Sequence[Song]) -> "MajorityClassifier":
        """Most frequent training label; ties to the lowest id."""
        counts = Counter(s.genre_id for s in songs)
        if not counts:
            raise ValueError("cannot fit a majority classifier on no songs")
        self.majority_id = min(counts, key=lambda g: (-counts[g], g))
        return self

    def collate(self, items):
        return SeqBatch(np.zeros((len(items), 0), dtype=np.int64),
                        np.zeros((len(items), 0), dtype=bool), _labels(items))

    def forward(self) -> int:
        return self.majority_id

    def predict_proba(self, batch) -> np.ndarray:
        p = np.zeros((len(batch.labels), self.config.n_classes))
        p[:, self.majority_id] = 1.0
        return p

    def logits(self, batch, dropout_p=0.0, rng=None) -> Tensor:
        raise TypeError("the majority classifier has no differentiable output")


class _FlatModel(Model):
    """Models that read the song as one flat token sequence."""

    truncate: int | None = None

    def prepare(self, songs):
        items = []
        for song in songs:
            flat = [tok for seg in song.segments for line in seg for tok in line]
            if not flat:
                raise EmptySongError("song has no tokens")
            if self.truncate is not None:
                flat = flat[: self.truncate]
            items.append((np.asarray(flat, dtype=np.int64), song.genre_id))
        return items

    def collate(self, items) -> SeqBatch:
        T = max(len(ids) for ids, _ in items)
        ids = np.full((len(items), T), PAD_ID, dtype=np.int64)
        for i, (seq, _) in enumerate(items):
            ids[i, : len(seq)] = seq
        return SeqBatch(ids, ids != PAD_ID, np.array([g for _, g in items], dtype=np.int64))


class LogisticRegression(_FlatModel):
    arch = "lr"

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 embedding: EmbeddingMatrix | None = None):
        super().__init__(config)
        dtype = ad.default_dtype()
        self.embedding = embedding or random_embeddings(
            config.vocab_size, config.embed_dim, rng, config.trainable_embeddings, dtype)
        self._params["embedding"] = self.embedding.matrix
        self._params["out.W"] = glorot(rng, (config.n_classes, config.embed_dim), dtype)
        self._params["out.b"] = zeros(config.n_classes, dtype)

    def song_vector(self, batch: SeqBatch) -> Tensor:
        x = lookup(self.embedding, batch.ids)
        valid = batch.mask.astype(x.dtype)
        counts = valid.sum(axis=1, keepdims=True)
        if np.any(counts == 0):
            logger.warning("all-PAD song in LR batch; using a zero input vector")
        weights = valid / np.maximum(counts, 1.0)
        B, T = batch.ids.shape
        return (x * weights.reshape(B, T, 1)).sum(axis=1)

    def logits(self, batch, dropout_p=0.0, rng=None) -> Tensor:
        v = self.song_vector(batch)
        return v @ self._params["out.W"].T + self._params["out.b"]


@dataclass
class LstmParams:
    """Gate weights of a standard LSTM; ``W_*`` (H, D), ``U_*`` (H, H)."""

    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng, dtype=None) -> "LstmParams":
        H, D = hidden_size, input_size
        w = {f"W_{g}": glorot(rng, (H, D), dtype) for g in "ifog"}
        u = {f"U_{g}": glorot(rng, (H, H), dtype) for g in "ifog"}
        b = {f"b_{g}": zeros(H, dtype) for g in "ifog"}
        b["b_f"].data[...] = 1.0
        return cls(**w, **u, **b)

    @property
    def hidden_size(self) -> int:
        return self.U_i.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


def lstm_step(p: LstmParams, x_t, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    """One LSTM update (Hochreiter & Schmidhuber with a forget gate).

    i, f, o = sigmoid(W x + U h + b); g = tanh(W_g x + U_g h + b_g);
    c = f*c_prev + i*g; h = o*tanh(c).
    """
    x_t, h_prev, c_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    i = ad.sigmoid(x_t @ p.W_i.T + h_prev @ p.U_i.T + p.b_i)
    f = ad.sigmoid(x_t @ p.W_f.T + h_prev @ p.U_f.T + p.b_f)
    o = ad.sigmoid(x_t @ p.W_o.T + h_prev @ p.U_o.T + p.b_o)
    g = ad.tanh(x_t @ p.W_g.T + h_prev @ p.U_g.T + p.b_g)
    c = f * c_prev + i * g
    return o * ad.tanh(c), c


class LstmClassifier(_FlatModel):
    arch = "lstm"

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 embedding: EmbeddingMatrix | None = None):
        super().__init__(config)
        dtype = ad.default_dtype()
        self.truncate = config.max_seq_len
        self.embedding = embedding or random_embeddings(
            config.vocab_size, config.embed_dim, rng, config.trainable_embeddings, dtype)
        self._params["embedding"] = self.embedding.matrix
        self.cell = LstmParams.init(config.embed_dim, config.hidden_size, rng, dtype)
        self._register("lstm", self.cell.tensors())
        self._params["out.W"] = glorot(rng, (config.n_classes, config.hidden_size), dtype)
        self._params["out.b"] = zeros(config.n_classes, dtype)

    def song_vector(self, batch: SeqBatch, dropout_p=0.0, rng=None) -> Tensor:
        p = self.cell
        x = self._embed(batch.ids, dropout_p, rng)
        B, T = batch.ids.shape
        H = p.hidden_size
        # Input projections for all steps at once.
        xi = x @ p.W_i.T + p.b_i
        xf = x @ p.W_f.T + p.b_f
        xo = x @ p.W_o.T + p.b_o
        xg = x @ p.W_g.T + p.b_g
        h = Tensor(np.zeros((B, H)), dtype=x.dtype, op="const")
        c = h
        states = []
        for t in range(T):
            i = ad.sigmoid(xi[:, t] + h @ p.U_i.T)
            f = ad.sigmoid(xf[:, t] + h @ p.U_f.T)
            o = ad.sigmoid(xo[:, t] + h @ p.U_o.T)
            g = ad.tanh(xg[:, t] + h @ p.U_g.T)
            c = f * c + i * g
            h = o * ad.tanh(c)
            states.append(h)
        hs = ad.stack(states, axis=1)
        fill = np.where(batch.mask, 0.0, -1e30).astype(x.dtype).reshape(B, T, 1)
        return (hs + fill).max(axis=1)

    def logits(self, batch, dropout_p=0.0, rng=None) -> Tensor:
        v = dropout(self.song_vector(batch, dropout_p, rng), dropout_p, dropout_p > 0, rng)
        return v @ self._params["out.W"].T + self._params["out.b"]


@dataclass
class HanOutput:
    logits: Tensor
    word_weights: np.ndarray | None  # (B, U, W)
    unit_weights: np.ndarray | None  # (B, U)


class HierarchicalModel(Model):
    """Word-level layer per unit, unit-level layer per song, softmax classifier.

    With ``attend=False`` both attention mechanisms become plain averages (HN-L).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator,
                 embedding: EmbeddingMatrix | None = None):
        super().__init__(config)
        self.arch = config.arch
        self.attend = config.arch != "hn-l"
        dtype = ad.default_dtype()
        d, H, A, C = config.embed_dim, config.hidden_size, config.attention_size, config.n_classes
        self.embedding = embedding or random_embeddings(
            config.vocab_size, d, rng, config.trainable_embeddings, dtype)
        self._params["embedding"] = self.embedding.matrix
        self.word_fwd = GruParams.init(d, H, rng, dtype)
        self.word_bwd = GruParams.init(d, H, rng, dtype)
        self.word_att = AttentionParams.init(2 * H, A, rng, dtype) if self.attend else None
        self.unit_fwd = GruParams.init(2 * H, H, rng, dtype)
        self.unit_bwd = GruParams.init(2 * H, H, rng, dtype)
        self.unit_att = AttentionParams.init(2 * H, A, rng, dtype) if self.attend else None
        self._register("word_fwd", self.word_fwd.tensors())
        self._register("word_bwd", self.word_bwd.tensors())
        if self.attend:
            self._register("word_att", self.word_att.tensors())
        self._register("unit_fwd", self.unit_fwd.tensors())
        self._register("unit_bwd", self.unit_bwd.tensors())
        if self.attend:
            self._register("unit_att", self.unit_att.tensors())
        self._params["out.W"] = glorot(rng, (C, 2 * H), dtype)
        self._params["out.b"] = zeros(C, dtype)

    def prepare(self, songs):
        cfg = self.config
        items = []
        for song in songs:
            units = song_units(song, cfg.granularity, cfg.segment_breaks)[: cfg.max_units]
            if not any(units):
                raise EmptySongError("song has no tokens")
            ids = np.full((cfg.max_units, cfg.max_words), PAD_ID, dtype=np.int64)
            for j, unit in enumerate(units):
                unit = unit[: cfg.max_words]
                ids[j, : len(unit)] = unit
            unit_mask = np.zeros(cfg.max_units, dtype=bool)
            unit_mask[: len(units)] = True
            items.append((ids, unit_mask, song.genre_id))
        return items

    def collate(self, items) -> HierBatch:
        ids = np.stack([it[0] for it in items])
        return HierBatch(ids=ids, word_mask=ids != PAD_ID,
                         unit_mask=np.stack([it[1] for it in items]),
                         labels=np.array([it[2] for it in items], dtype=np.int64))

    def _pool(self, p_att, hs, mask):
        if p_att is None:
            return mean_pool(hs, mask), None
        s, weights, _ = attention(p_att, hs, mask)
        return s, weights

    def forward(self, batch: HierBatch, dropout_p: float = 0.0, rng=None) -> HanOutput:
        train = dropout_p > 0
        B, U, W = batch.ids.shape
        H2 = 2 * self.config.hidden_size
        flat_ids = batch.ids.reshape(B * U, W)
        flat_mask = batch.word_mask.reshape(B * U, W)
        # Units without words pool to zero; skip their word-level pass.
        rows = np.flatnonzero(flat_mask.any(axis=1))
        x = dropout(lookup(self.embedding, flat_ids[rows]), dropout_p, train, rng)
        hs = bidirectional_gru(self.word_fwd, self.word_bwd, x)
        s_rows, w_rows = self._pool(self.word_att, hs, flat_mask[rows])
        s_units = ad.scatter_rows(s_rows, rows, B * U).reshape(B, U, H2)
        s_units = dropout(s_units, dropout_p, train, rng)
        hu = bidirectional_gru(self.unit_fwd, self.unit_bwd, s_units)
        s, unit_w = self._pool(self.unit_att, hu, batch.unit_mask)
        s = dropout(s, dropout_p, train, rng)
        logits = s @ self._params["out.W"].T + self._params["out.b"]
        word_weights = unit_weights = None
        if self.attend:
            word_weights = np.zeros((B * U, W), dtype=w_rows.dtype)
            word_weights[rows] = w_rows.data
            word_weights = word_weights.reshape(B, U, W)
            unit_weights = unit_w.data
        return HanOutput(logits, word_weights, unit_weights)

    def logits(self, batch, dropout_p=0.0, rng=None) -> Tensor:
        return self.forward(batch, dropout_p, rng).logits


def build_model(config: ModelConfig, seed: int = 0,
                embedding: EmbeddingMatrix | None = None) -> Model:
    """Instantiate an architecture with parameters drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    if embedding is not None and embedding.matrix.shape != (config.vocab_size, config.embed_dim):
        raise ValueError(f"embedding shape {embedding.matrix.shape} does not match config")
    if config.arch == "mc":
        return MajorityClassifier(config)
    if config.arch == "lr":
        return LogisticRegression(config, rng, embedding)
    if config.arch == "lstm":
        return LstmClassifier(config, rng, embedding)
    return HierarchicalModel(config, rng, embedding)


def han_forward(model: HierarchicalModel, song: Song) -> tuple[np.ndarray, np.ndarray | None,
                                                                np.ndarray | None]:
    """Class probabilities and attention weights for a single song (eval mode)."""
    out = model.forward(model.batch([song]))
    p = ad.softmax(out.logits).data[0]
    ww = None if out.word_weights is None else out.word_weights[0]
    uw = None if out.unit_weights is None else out.unit_weights[0]
    return p, ww, uw


# -- checkpoints ----------------------------------------------------------------------

MAGIC = b"LYRHANCK"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    """Config, parameters, vocabulary and metadata of a trained model."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: list[str]
    genres: list[str]
    metadata: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def from_model(cls, model: Model, vocab: Vocabulary | Sequence[str], genres: Sequence[str],
                   metadata: dict | None = None, history: list[dict] | None = None
                   ) -> "ModelCheckpoint":
        meta = dict(metadata or {})
        if isinstance(model, MajorityClassifier):
            meta["majority_id"] = model.majority_id
        meta.setdefault("init", {"matrices": "glorot-uniform", "biases": "zeros",
                                 "relevance": "uniform(-0.05,0.05)",
                                 "embeddings_oov": "uniform(-0.05,0.05)", "lstm_forget_bias": 1.0})
        tokens = vocab.itos if isinstance(vocab, Vocabulary) else list(vocab)
        return cls(model.config, model.state_dict(), list(tokens), list(genres), meta,
                   list(history or []))

    def build(self) -> Model:
        model = build_model(self.config, seed=0)
        if isinstance(model, MajorityClassifier):
            model.majority_id = int(self.metadata.get("majority_id", 0))
        else:
            dtypes = {a.dtype for a in self.params.values()}
            if len(dtypes) == 1:
                dtype = dtypes.pop()
                for t in model.parameters().values():
                    t.data = t.data.astype(dtype)
            model.load_state_dict(self.params)
        return model

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.vocab[2:])

    def save(self, path: str | Path) -> None:
        """Write atomically: temp file in the target directory, then rename."""
        path = Path(path)
        tensors, blobs, offset = [], [], 0
        for name, arr in self.params.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"))
            raw = le.tobytes()
            tensors.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps({"config": self.config.to_dict(), "vocab": self.vocab,
                             "genres": self.genres, "metadata": self.metadata,
                             "history": self.history, "tensors": tensors},
                            sort_keys=True, ensure_ascii=False).encode("utf-8")
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(MAGIC)
                fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
                fh.write(header)
                for raw in blobs:
                    fh.write(raw)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        data = Path(path).read_bytes()
        if data[: len(MAGIC)] != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        start = len(MAGIC) + struct.calcsize("<IQ")
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        body = start + hlen
        params = {}
        for t in header["tensors"]:
            lo = body + t["offset"]
            arr = np.frombuffer(data[lo:lo + t["nbytes"]], dtype=np.dtype(t["dtype"]))
            params[t["name"]] = arr.reshape(t["shape"]).astype(arr.dtype.newbyteorder("="))
        return cls(ModelConfig(**header["config"]), params, header["vocab"], header["genres"],
                   header["metadata"], header["history"])
