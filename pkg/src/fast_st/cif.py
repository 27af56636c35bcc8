"""Continuous integrate-and-fire (CIF) boundary detection.

Two realisations of the same accumulation rule live here:

* :func:`integrate_fire` walks frames one at a time (numpy, used at inference
  and as the reference for tests);
* :func:`contribution_matrix` expresses each frame's share of each unit through
  the cumulative weight sum, which makes the shrunk states differentiable with
  respect to the weights during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, maximum, minimum
from .nn import Linear, Module

FIRE_TOL = 1e-9


class CifDetector(Module):
    """Per-frame integration weights ``alpha_t = sigmoid(w . a_t + b)``."""

    def __init__(self, d: int, rng: np.random.Generator, beta: float = 1.0, tail_threshold: float = 0.5):
        if beta <= 0:
            raise ValueError("firing threshold must be positive")
        self.proj = Linear(d, 1, rng)
        self._beta = beta
        self._tail = tail_threshold

    @property
    def beta(self) -> float:
        return self._beta

    @property
    def tail_threshold(self) -> float:
        return self._tail

    def __call__(self, a: Tensor) -> Tensor:
        return self.proj(a).sigmoid()[..., 0]

    compute_weights = __call__


@dataclass
class CifResult:
    weights: np.ndarray
    states: np.ndarray  # (J', d)
    boundaries: list[int]  # 1-based frame index of each firing
    residual: float
    contributions: list[list[tuple[int, float]]] = field(default_factory=list)
    tail_fired: bool = False

    @property
    def n_units(self) -> int:
        return len(self.boundaries)


def integrate_fire(
    a: np.ndarray,
    alpha: np.ndarray,
    beta: float = 1.0,
    scale_to: int | None = None,
    mode: str = "offline",
    tail_threshold: float = 0.5,
) -> CifResult:
    """Accumulate ``alpha`` over frames and fire a unit each time the sum reaches ``beta``.

    A frame whose weight crosses the threshold is split: the part completing
    ``beta`` closes the current unit and the remainder opens the next one
    (repeatedly, should a single weight exceed ``beta``).  ``mode="offline"``
    fires a final partial unit when the leftover is at least
    ``tail_threshold``; ``mode="streaming"`` never does.
    """
    a = np.asarray(a, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if a.shape[0] != alpha.shape[0]:
        raise ValueError(f"{a.shape[0]} frames but {alpha.shape[0]} weights")
    if mode not in ("offline", "streaming"):
        raise ValueError(f"unknown CIF mode {mode!r}")
    if scale_to is not None:
        total = alpha.sum()
        if total <= 0:
            raise ValueError("cannot rescale all-zero weights")
        alpha = alpha * (scale_to / total)

    d = a.shape[1] if a.ndim == 2 else 0
    states, boundaries, contributions = [], [], []
    acc = 0.0
    cur = np.zeros(d)
    cur_parts: list[tuple[int, float]] = []
    for t in range(alpha.shape[0]):
        w = alpha[t]
        while acc + w >= beta - FIRE_TOL:
            part = min(beta - acc, w)
            cur = cur + part * a[t]
            cur_parts.append((t, part))
            states.append(cur / beta)
            boundaries.append(t + 1)
            contributions.append(cur_parts)
            w -= part
            acc, cur, cur_parts = 0.0, np.zeros(d), []
            if w <= 0.0:
                break
        if w > 0.0:
            acc += w
            cur = cur + w * a[t]
            cur_parts.append((t, w))

    tail = False
    if mode == "offline" and acc >= tail_threshold:
        states.append(cur / beta)
        boundaries.append(alpha.shape[0])
        contributions.append(cur_parts)
        tail = True
        residual = 0.0
    else:
        residual = acc
    return CifResult(
        weights=alpha,
        states=np.stack(states) if states else np.zeros((0, d)),
        boundaries=boundaries,
        residual=residual,
        contributions=contributions,
        tail_fired=tail,
    )


def streaming_boundary_count(alpha_prefix, beta: float = 1.0) -> int:
    """Number of complete firings over a prefix (no rescaling, no tail fire)."""
    alpha = np.asarray(alpha_prefix, dtype=np.float64).reshape(-1)
    acc, n = 0.0, 0
    for w in alpha:
        while acc + w >= beta - FIRE_TOL:
            part = min(beta - acc, w)
            n += 1
            w -= part
            acc = 0.0
            if w <= 0.0:
                break
        if w > 0.0:
            acc += w
    return n


def cif_length_loss(alpha: Tensor, J, lengths=None) -> Tensor:
    """``|J - sum_t alpha_t|``; batched when ``alpha`` is (B, T) and ``J`` a vector.

    ``lengths`` masks padded frames out of the sum.
    """
    alpha = Tensor._wrap(alpha)
    if lengths is not None:
        mask = np.arange(alpha.shape[-1])[None, :] < np.asarray(lengths)[:, None]
        alpha = alpha * mask
    total = alpha.sum(axis=-1)
    return (total - np.asarray(J, dtype=np.float64)).abs()


def contribution_matrix(alpha: Tensor, n_units: int, beta: float = 1.0) -> Tensor:
    """Share of frame ``t`` in unit ``j``: overlap of ``[C_{t-1}, C_t)`` with ``[(j-1)beta, j beta)``.

    ``alpha`` is (B, T) with padded frames already zeroed; the result is
    (B, n_units, T).  Rows sum to ``beta`` for every completed unit.
    """
    B, T = alpha.shape
    C = alpha.cumsum(axis=-1)  # (B, T)
    prev = C - alpha
    upper = (np.arange(1, n_units + 1) * beta)[None, :, None]  # (1, U, 1)
    lower = upper - beta
    hi = minimum(C.reshape(B, 1, T), np.broadcast_to(upper, (B, n_units, T)))
    lo = maximum(prev.reshape(B, 1, T), np.broadcast_to(lower, (B, n_units, T)))
    return (hi - lo).relu()


def scale_weights(alpha: Tensor, J, lengths) -> Tensor:
    """Rescale each row of (B, T) weights so that the unpadded sum equals its target length."""
    mask = np.arange(alpha.shape[-1])[None, :] < np.asarray(lengths)[:, None]
    alpha = alpha * mask
    total = alpha.sum(axis=-1, keepdims=True)
    return alpha * (np.asarray(J, dtype=np.float64)[:, None] / total)
