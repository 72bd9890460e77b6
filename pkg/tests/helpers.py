"""Shared fixtures-as-functions: tiny models, tiny songs, gradient checking."""

from __future__ import annotations

import numpy as np

from lyrichan import autodiff as ad
from lyrichan.corpus import Song
from lyrichan.models import ModelConfig, build_model
from lyrichan.training import cross_entropy

from oracles import relative_error

# The tiny configuration used for every finite-difference check.
TINY = dict(vocab_size=20, embed_dim=4, hidden_size=3, attention_size=5, n_classes=3)
DIFFERENTIABLE = ("lr", "lstm", "hn-l", "han-l", "han-s")


def tiny_songs() -> list[Song]:
    """Two songs over ids 2..19, with two segments each and a short line."""
    a = Song(segments=[[[2, 3, 4], [5, 6]], [[7, 8, 9]]], genre_id=0)
    b = Song(segments=[[[10, 11]], [[12, 13, 14], [15], [16, 17]]], genre_id=2)
    return [a, b]


def tiny_model(arch: str, seed: int = 0, **overrides):
    kwargs = dict(TINY)
    if arch in ("hn-l", "han-l", "han-s"):
        kwargs.update(max_units=4, max_words=3)
    kwargs.update(overrides)
    return build_model(ModelConfig(arch, **kwargs), seed=seed)


def batch_loss(model, batch) -> ad.Tensor:
    return cross_entropy(model.logits(batch), batch.labels)


def gradient_check(model, songs, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error per parameter between backward and central differences.

    Must run under ``ad.precision("float64")``.
    """
    batch = model.batch(songs)
    params = model.trainable_parameters()
    model.zero_grad()
    batch_loss(model, batch).backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    numeric = ad.numerical_gradient(lambda: batch_loss(model, batch).item(),
                                    list(params.values()), step=step)
    return {k: float(relative_error(analytic[k], n).max())
            for k, n in zip(params, numeric)}


def random_gru_params(rng, D: int, H: int, scale: float = 1.0) -> dict:
    out = {}
    for g in "zrh":
        out[f"W_{g}"] = rng.uniform(-scale, scale, (H, D))
        out[f"U_{g}"] = rng.uniform(-scale, scale, (H, H))
        out[f"b_{g}"] = rng.uniform(-scale, scale, H)
    return out


def as_params(cls, arrays: dict):
    """Wrap plain arrays as a float64 parameter dataclass (GruParams, AttentionParams, ...)."""
    return cls(**{k: ad.Tensor(v, requires_grad=True, dtype=np.float64)
                  for k, v in arrays.items()})


# One line per acceptance criterion, echoed in the pytest terminal summary.
ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
