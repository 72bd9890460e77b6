"""GRU cell, bidirectional GRU, attention pooling and the combined layer.

All functions accept batched inputs: sequences are ``(N, T, D)`` tensors
(a single ``(T, D)`` sequence is also accepted) and masks are boolean
``(N, T)`` arrays marking real positions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

logger = logging.getLogger(__name__)

MASK_FILL = 1e30
RELEVANCE_SCALE = 0.05


def glorot(rng: np.random.Generator, shape: tuple[int, int], dtype=None) -> Tensor:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


@dataclass
class GruParams:
    """Weights of one GRU direction. ``W_*`` are (H, D), ``U_*`` are (H, H)."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator,
             dtype=None) -> "GruParams":
        H, D = hidden_size, input_size
        return cls(
            W_z=glorot(rng, (H, D), dtype), W_r=glorot(rng, (H, D), dtype),
            W_h=glorot(rng, (H, D), dtype),
            U_z=glorot(rng, (H, H), dtype), U_r=glorot(rng, (H, H), dtype),
            U_h=glorot(rng, (H, H), dtype),
            b_z=zeros(H, dtype), b_r=zeros(H, dtype), b_h=zeros(H, dtype),
        )

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class AttentionParams:
    """``W_a`` is (A, M), ``b_a`` and the relevance vector ``u_a`` are (A,)."""

    W_a: Tensor
    b_a: Tensor
    u_a: Tensor

    @classmethod
    def init(cls, input_size: int, attention_size: int, rng: np.random.Generator,
             dtype=None) -> "AttentionParams":
        u_a = Tensor(rng.uniform(-RELEVANCE_SCALE, RELEVANCE_SCALE, size=attention_size),
                     requires_grad=True, dtype=dtype)
        return cls(W_a=glorot(rng, (attention_size, input_size), dtype),
                   b_a=zeros(attention_size, dtype), u_a=u_a)

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.shape[-1] != width:
        raise DimensionError(f"{what}: expected last dimension {width}, got shape {x.shape}")


def _project(p: GruParams, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Input-side affine terms W x + b for the three gates."""
    return (x @ p.W_z.T + p.b_z, x @ p.W_r.T + p.b_r, x @ p.W_h.T + p.b_h)


def _cell(p: GruParams, xz: Tensor, xr: Tensor, xh: Tensor, h_prev: Tensor) -> Tensor:
    z = ad.sigmoid(xz + h_prev @ p.U_z.T)
    r = ad.sigmoid(xr + h_prev @ p.U_r.T)
    h_cand = ad.tanh(xh + r * (h_prev @ p.U_h.T))
    return (1.0 - z) * h_prev + z * h_cand


def gru_step(p: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update for input ``(..., D)`` and previous state ``(..., H)``."""
    x_t, h_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev)
    _check_width(x_t, p.input_size, "gru_step input")
    _check_width(h_prev, p.hidden_size, "gru_step state")
    return _cell(p, *_project(p, x_t), h_prev)


def gru_sequence(p: GruParams, xs: Tensor, reverse: bool = False) -> Tensor:
    """Run one direction over ``(N, T, D)`` from a zero state; returns ``(N, T, H)``
    with outputs aligned to input positions."""
    N, T, _ = xs.shape
    xz, xr, xh = _project(p, xs)
    h = Tensor(np.zeros((N, p.hidden_size)), dtype=xs.dtype, op="const")
    outputs: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        h = _cell(p, xz[:, t], xr[:, t], xh[:, t], h)
        outputs[t] = h
    return ad.stack(outputs, axis=1)


def _as_batch(xs) -> tuple[Tensor, bool]:
    xs = ad.as_tensor(xs)
    if xs.ndim == 2:
        return xs.reshape((1,) + xs.shape), True
    if xs.ndim != 3:
        raise DimensionError(f"expected a (T, D) or (N, T, D) sequence, got shape {xs.shape}")
    return xs, False


def bidirectional_gru(p_fwd: GruParams, p_bwd: GruParams, xs, mask=None) -> Tensor:
    """Concatenated forward/backward states ``[h_fwd ; h_bwd]`` per position.

    Both directions run over the full padded length; ``mask`` is accepted for
    interface symmetry and applied later at attention.
    """
    xs, squeeze = _as_batch(xs)
    if xs.shape[1] == 0:
        raise DimensionError("bidirectional_gru: empty sequence")
    _check_width(xs, p_fwd.input_size, "bidirectional_gru input")
    out = ad.concat([gru_sequence(p_fwd, xs), gru_sequence(p_bwd, xs, reverse=True)], axis=-1)
    return out.reshape(out.shape[1:]) if squeeze else out


def _mask_array(mask, shape: tuple[int, int]) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(shape)
    return mask


def attention(p: AttentionParams, hs, mask=None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Attention pooling over positions.

    Returns ``(s, weights, degenerate)`` where ``s`` is ``(N, M)``, ``weights``
    is ``(N, T)`` and ``degenerate`` flags sequences with no valid position
    (their ``s`` and weights are all zero).
    """
    hs, squeeze = _as_batch(hs)
    N, T, M = hs.shape
    if T == 0:
        raise DimensionError("attention: empty sequence")
    _check_width(hs, p.W_a.shape[1], "attention input")
    valid = _mask_array(mask, (N, T))
    degenerate = ~valid.any(axis=1)
    if degenerate.any():
        logger.debug("attention over %d fully masked sequence(s)", int(degenerate.sum()))
    u = ad.tanh(hs @ p.W_a.T + p.b_a)
    scores = u @ p.u_a
    fill = np.where(valid, 0.0, -MASK_FILL).astype(hs.dtype)
    alpha = ad.softmax(scores + fill, axis=-1) * valid.astype(hs.dtype)
    s = (alpha.reshape((N, T, 1)) * hs).sum(axis=1)
    if squeeze:
        return s.reshape((M,)), alpha.reshape((T,)), degenerate
    return s, alpha, degenerate


def mean_pool(hs, mask=None) -> Tensor:
    """Arithmetic mean over valid positions (zero for fully masked sequences)."""
    hs, squeeze = _as_batch(hs)
    N, T, M = hs.shape
    valid = _mask_array(mask, (N, T)).astype(hs.dtype)
    counts = np.maximum(valid.sum(axis=1, keepdims=True), 1.0)
    s = (hs * (valid / counts).reshape((N, T, 1))).sum(axis=1)
    return s.reshape((M,)) if squeeze else s


def layer(p_fwd: GruParams, p_bwd: GruParams, p_att: AttentionParams | None, xs, mask=None
          ) -> tuple[Tensor, Tensor | None]:
    """Bidirectional GRU followed by attention; ``p_att=None`` averages instead."""
    hs = bidirectional_gru(p_fwd, p_bwd, xs, mask)
    if p_att is None:
        return mean_pool(hs, mask), None
    s, weights, _ = attention(p_att, hs, mask)
    return s, weights


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors by 1/(1-p).

    Identity in eval mode or when ``p == 0``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep
