"""scikit-learn compatible wrapper around the lyrics classifiers."""

from __future__ import annotations

from collections import Counter

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .corpus import RawRecord, build_vocabulary, encode_song, rank_genres
from .embeddings import load_glove
from .models import ARCHITECTURES, ModelCheckpoint, ModelConfig, build_model
from .training import TrainConfig, train
from .visualize import attention_report


def check_lyrics(X) -> list[str]:
    """Validate a 1-D collection of lyric strings."""
    if isinstance(X, str):
        raise TypeError("expected a sequence of lyrics, got a single string")
    X = list(np.asarray(X, dtype=object).ravel()) if isinstance(X, np.ndarray) else list(X)
    if not X:
        raise ValueError("no lyrics given")
    bad = [i for i, x in enumerate(X) if not isinstance(x, str)]
    if bad:
        raise TypeError(f"lyrics must be strings (first offending index {bad[0]})")
    return X


def check_labels(y, n: int) -> list[str]:
    y = [str(v) for v in (y.tolist() if isinstance(y, np.ndarray) else y)]
    if len(y) != n:
        raise ValueError(f"got {n} lyrics but {len(y)} labels")
    return y


class LyricsGenreClassifier(ClassifierMixin, BaseEstimator):
    """Genre classifier over raw lyric strings.

    Parameters mirror the model and training configuration. ``classes_`` is
    ordered by descending training frequency (ties lexicographic), which is
    also the internal genre-id order.

    Examples
    --------
    >>> clf = LyricsGenreClassifier(model_type="lr", max_epochs=5)  # doctest: +SKIP
    >>> clf.fit(lyrics, genres).predict(["some new lyrics"])         # doctest: +SKIP
    """

    def __init__(self, model_type: str = "han-l", embed_dim: int = 100, hidden_size: int = 50,
                 attention_size: int = 100, max_units: int | None = None,
                 max_words: int | None = None, max_seq_len: int = 600, max_vocab: int = 30_000,
                 batch_size: int = 64, learning_rate: float = 0.01, rmsprop_decay: float = 0.9,
                 rmsprop_epsilon: float = 1e-8, dropout_p: float = 0.5, clip_norm: float = 1.0,
                 patience: int | None = 3, max_epochs: int = 50,
                 validation_fraction: float = 0.1, glove_path: str | None = None,
                 freeze_embeddings: bool = False, precision: str = "float32",
                 random_state: int = 0):
        self.model_type = model_type
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.attention_size = attention_size
        self.max_units = max_units
        self.max_words = max_words
        self.max_seq_len = max_seq_len
        self.max_vocab = max_vocab
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.rmsprop_decay = rmsprop_decay
        self.rmsprop_epsilon = rmsprop_epsilon
        self.dropout_p = dropout_p
        self.clip_norm = clip_norm
        self.patience = patience
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.glove_path = glove_path
        self.freeze_embeddings = freeze_embeddings
        self.precision = precision
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           rmsprop_decay=self.rmsprop_decay, rmsprop_epsilon=self.rmsprop_epsilon,
                           dropout_p=self.dropout_p, clip_norm=self.clip_norm,
                           patience=self.patience, seed=self.random_state,
                           max_epochs=self.max_epochs)

    def fit(self, X, y, X_val=None, y_val=None):
        """Build the vocabulary, hold out a validation share unless given, train."""
        if self.model_type not in ARCHITECTURES:
            raise ValueError(f"unknown model_type {self.model_type!r}")
        X = check_lyrics(X)
        y = check_labels(y, len(X))
        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must lie in (0, 1)")
            order = np.random.default_rng(self.random_state).permutation(len(X))
            n_val = max(1, int(len(X) * self.validation_fraction))
            val_idx, train_idx = order[:n_val], order[n_val:]
            X_val, y_val = [X[i] for i in val_idx], [y[i] for i in val_idx]
            X, y = [X[i] for i in train_idx], [y[i] for i in train_idx]
        else:
            X_val = check_lyrics(X_val)
            y_val = check_labels(y_val, len(X_val))
        if not X:
            raise ValueError("no training songs left after the validation hold-out")

        self.classes_ = np.array(rank_genres(Counter(y)), dtype=object)
        index = {g: i for i, g in enumerate(self.classes_)}
        records = [RawRecord(str(i), "", "", text) for i, text in enumerate(X)]
        self.vocab_ = build_vocabulary(records, self.max_vocab)
        train_songs = [encode_song(t, self.vocab_, index[g]) for t, g in zip(X, y)]
        val_songs = [encode_song(t, self.vocab_, index[g]) for t, g in zip(X_val, y_val)
                     if g in index]
        with ad.precision(self.precision):
            config = ModelConfig(self.model_type, len(self.classes_), len(self.vocab_),
                                 embed_dim=self.embed_dim, hidden_size=self.hidden_size,
                                 attention_size=self.attention_size, max_units=self.max_units,
                                 max_words=self.max_words, max_seq_len=self.max_seq_len,
                                 trainable_embeddings=not self.freeze_embeddings)
            embedding = None
            if self.glove_path and self.model_type != "mc":
                embedding = load_glove(self.glove_path, self.vocab_, self.embed_dim,
                                       seed=self.random_state,
                                       trainable=not self.freeze_embeddings)
            model = build_model(config, seed=self.random_state, embedding=embedding)
            result = train(model, train_songs, val_songs, self._train_config())
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def _songs(self, X):
        songs = [encode_song(t, self.vocab_) for t in check_lyrics(X)]
        empty = [i for i, s in enumerate(songs) if s.n_tokens() == 0]
        if empty:
            raise ValueError(f"lyrics at index {empty[0]} contain no tokens")
        return songs

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        songs = self._songs(X)
        out = []
        for start in range(0, len(songs), self.batch_size):
            out.append(self.model_.predict_proba(self.model_.batch(songs[start:start + self.batch_size])))
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def attention(self, lyrics: str, top_k: int = 5) -> dict:
        """Attention report for one song (HAN models only)."""
        check_is_fitted(self, "model_")
        return attention_report(self.model_, self._songs([lyrics])[0], list(self.classes_), top_k)

    def to_checkpoint(self) -> ModelCheckpoint:
        check_is_fitted(self, "model_")
        return ModelCheckpoint.from_model(self.model_, self.vocab_, list(self.classes_),
                                          {"seed": self.random_state,
                                           "train_config": self._train_config().to_dict()},
                                          self.history_)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.string = True
        tags.input_tags.two_d_array = False
        return tags
