"""Loss, optimizer, clipping, the training loop and evaluation metrics."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .corpus import Song
from .models import MajorityClassifier, Model

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.01
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    dropout_p: float = 0.5
    clip_norm: float = 1.0
    patience: int | None = 3
    seed: int = 0
    max_epochs: int = 50

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        for name in ("batch_size", "learning_rate", "rmsprop_decay", "rmsprop_epsilon",
                     "clip_norm", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive (or None to disable)")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["dropout_placement"] = ["embeddings", "unit_vectors", "song_vector"]
        return out


# -- loss ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Summed negative log-likelihood of the true classes, via log-softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range for {C} classes")
    logp = ad.log_softmax(logits, axis=-1)
    return -(logp[np.arange(B), labels].sum())


# -- gradients and optimizer -------------------------------------------------------------

def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient before clipping")
    total = global_norm(grads)
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


@dataclass
class RMSpropState:
    cache: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: RMSpropState,
                 lr: float = 0.01, decay: float = 0.9, eps: float = 1e-8) -> None:
    """cache <- decay*cache + (1-decay)*g^2;  param <- param - lr*g/(sqrt(cache)+eps)."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        cache = state.cache.get(name)
        if cache is None:
            cache = state.cache[name] = np.zeros_like(p.data)
        cache *= decay
        cache += (1.0 - decay) * g * g
        p.data -= lr * g / (np.sqrt(cache) + eps)


# -- early stopping ------------------------------------------------------------------

class EarlyStopping:
    """Track the best validation loss; ties keep the earliest epoch."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_state = None
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float, state=None) -> bool:
        """Record an epoch; returns True when training should stop."""
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.best_state = loss, epoch, state
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.patience is not None and self.bad_epochs >= self.patience


class DivergenceError(RuntimeError):
    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_val_loss: float


def iter_batches(items: Sequence, batch_size: int, order=None):
    order = range(len(items)) if order is None else order
    order = list(order)
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


def dataset_loss(model: Model, items: Sequence, batch_size: int = 64) -> float:
    """Mean per-song loss in eval mode."""
    total = 0.0
    for chunk in iter_batches(items, batch_size):
        batch = model.collate(chunk)
        total += cross_entropy(model.logits(batch), batch.labels).item()
    return total / len(items)


def dataset_accuracy(model: Model, items: Sequence, batch_size: int = 64) -> float:
    correct = 0
    for chunk in iter_batches(items, batch_size):
        batch = model.collate(chunk)
        correct += int(np.sum(model.predict_batch(batch) == batch.labels))
    return correct / len(items)


def train(model: Model, train_songs: Sequence[Song], val_songs: Sequence[Song],
          cfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch RMSprop on the summed cross-entropy with early stopping.

    The model is left holding the parameters of the best validation epoch.
    """
    if not train_songs or not val_songs:
        raise ValueError("training and validation splits must be non-empty")
    if isinstance(model, MajorityClassifier):
        model.fit(train_songs)
        acc = dataset_accuracy(model, model.prepare(val_songs))
        row = {"epoch": 1, "train_loss": None, "val_loss": None, "val_accuracy": acc,
               "wall_seconds": 0.0}
        if on_epoch:
            on_epoch(row)
        return TrainResult(model, [row], 1, math.nan)

    rng = np.random.default_rng(cfg.seed)
    train_items = model.prepare(train_songs)
    val_items = model.prepare(val_songs)
    params = model.trainable_parameters()
    state = RMSpropState()
    stopper = EarlyStopping(cfg.patience)
    history: list[dict] = []
    start = time.perf_counter()

    def result() -> TrainResult:
        if stopper.best_state is not None:
            model.load_state_dict(stopper.best_state)
        return TrainResult(model, history, stopper.best_epoch, stopper.best_loss)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_items))
        epoch_loss = 0.0
        try:
            for chunk in iter_batches(train_items, cfg.batch_size, order):
                batch = model.collate(chunk)
                model.zero_grad()
                loss = cross_entropy(model.logits(batch, cfg.dropout_p, rng), batch.labels)
                loss.backward()
                grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                         for k, p in params.items()}
                clip_gradients(list(grads.values()), cfg.clip_norm)
                rmsprop_step(params, grads, state, cfg.learning_rate, cfg.rmsprop_decay,
                             cfg.rmsprop_epsilon)
                model.after_step()
                epoch_loss += loss.item()
            val_loss = dataset_loss(model, val_items, cfg.batch_size)
        except NonFiniteError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}", result()) from exc
        if not math.isfinite(val_loss):
            raise DivergenceError(f"epoch {epoch}: validation loss is {val_loss}", result())
        row = {"epoch": epoch, "train_loss": epoch_loss / len(train_items), "val_loss": val_loss,
               "val_accuracy": dataset_accuracy(model, val_items, cfg.batch_size),
               "wall_seconds": time.perf_counter() - start}
        history.append(row)
        logger.info("epoch %d train %.4f val %.4f acc %.4f", epoch, row["train_loss"],
                    val_loss, row["val_accuracy"])
        if on_epoch:
            on_epoch(row)
        if stopper.update(epoch, val_loss, model.state_dict()):
            break
    return result()


# -- evaluation ----------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """Counts with rows = true genre, columns = predicted genre."""

    counts: np.ndarray
    labels: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def restrict(self, k: int) -> "ConfusionMatrix":
        """The sub-matrix for the first ``k`` genres (ids are frequency-ranked)."""
        return ConfusionMatrix(self.counts[:k, :k].copy(), self.labels[:k])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["true\\predicted", *self.labels])
            for label, row in zip(self.labels, self.counts):
                writer.writerow([label, *map(int, row)])


def evaluate(model: Model, songs: Sequence[Song], labels: Sequence[str] | None = None,
             batch_size: int = 64) -> tuple[float, ConfusionMatrix, np.ndarray]:
    """Accuracy, confusion matrix and per-song predictions (dropout off)."""
    if not songs:
        raise ValueError("cannot evaluate on an empty split")
    C = model.config.n_classes
    labels = list(labels) if labels is not None else [str(i) for i in range(C)]
    counts = np.zeros((C, C), dtype=np.int64)
    preds = []
    for chunk in iter_batches(model.prepare(songs), batch_size):
        batch = model.collate(chunk)
        pred = model.predict_batch(batch)
        np.add.at(counts, (batch.labels, pred), 1)
        preds.append(pred)
    cm = ConfusionMatrix(counts, labels)
    return cm.accuracy(), cm, np.concatenate(preds)


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_accuracy", "wall_seconds")


def write_history(history: Sequence[dict], path: str | Path, record_time: bool = False) -> None:
    """History CSV. Wall time is left blank unless ``record_time`` so reruns match byte for byte."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            out = []
            for key in HISTORY_FIELDS:
                value = row.get(key)
                if key == "wall_seconds" and not record_time:
                    value = None
                out.append("" if value is None else (value if key == "epoch" else repr(float(value))))
            writer.writerow(out)
