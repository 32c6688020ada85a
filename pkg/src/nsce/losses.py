"""Loss terms of the non-sparse objective, each returned with its gradient.

All functions are pure.  Shapes: logits ``(n, C)``, labels ``(n,)``,
representations ``(n, h)``, head weights ``W`` of shape ``(h, C)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np

from .classifier import softmax

DEFAULT_GAMMA = 0.01


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    ls: float
    lp: float
    lb: float
    total: float
    gamma: float

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(ce: float, ls: float, lp: float, gamma: float, lb: float = 0.0) -> float:
    """``ce + gamma * (lp + ls)``, plus the replay term when present."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return ce + gamma * (lp + ls) + lb


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its gradient with respect to the logits."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = z.shape[0]
    rows = np.arange(n)
    loss = float(-np.mean(_log_softmax(z)[rows, y]))
    grad = softmax(z)
    grad[rows, y] -= 1.0
    return loss, grad / n


def sparsity_ratio(W: np.ndarray) -> np.ndarray:
    """Per column ``mean(|w|) / ||w||_2``; zero columns give 0."""
    A = np.abs(np.asarray(W, dtype=np.float64))
    d = A.shape[0]
    # the ratio is scale-free; dividing by the column max avoids underflow
    peak = A.max(axis=0)
    A = np.divide(A, peak, out=np.zeros_like(A), where=peak > 0)
    norms = np.linalg.norm(A, axis=0)
    return np.divide(A.sum(axis=0) / d, norms, out=np.zeros_like(norms), where=norms > 0)


def sparsity_regularizer(W: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative sum over columns of mean-abs over l2 norm, with its gradient.

    Zero columns contribute no loss and no gradient; ``sign(0)`` is 0.
    """
    W = np.asarray(W, dtype=np.float64)
    d = W.shape[0]
    norms = np.linalg.norm(W, axis=0)
    live = norms > 0
    ratio = sparsity_ratio(W)
    safe = np.where(live, norms, 1.0)
    # d ratio / d w_i = sign(w_i) / (d ||w||) - ratio * w_i / ||w||^2
    dratio = np.sign(W) / (d * safe) - ratio * W / safe**2
    grad = np.where(live, -dratio, 0.0)
    return -float(ratio.sum()), grad


def etf_targets(n_active: int) -> np.ndarray:
    """Target Gram matrix of a simplex equiangular tight frame."""
    if n_active < 2:
        raise ValueError("a simplex ETF needs at least two classes")
    c = float(n_active)
    return (c / (c - 1.0)) * np.eye(n_active) - 1.0 / (c - 1.0)


def separation_loss(vectors: np.ndarray) -> tuple[float, np.ndarray]:
    """ETF alignment loss of the row vectors and its gradient w.r.t. each row.

    Rows are unit-normalized first, so the inner products are cosines.  The
    sum runs over all ``(i, j)`` including the diagonal.
    """
    U = np.asarray(vectors, dtype=np.float64)
    k = U.shape[0]
    P = etf_targets(k)
    norms = np.linalg.norm(U, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero-norm representation")
    R = U / norms[:, None]
    diff = R @ R.T - P
    loss = float((diff**2).sum() / k**2)
    dR = (4.0 / k**2) * diff @ R
    # project out the radial component of the normalization
    dU = (dR - (dR * R).sum(axis=1, keepdims=True) * R) / norms[:, None]
    return loss, dU


def max_separation(
    representations: np.ndarray,
    labels: np.ndarray,
    fallbacks: Mapping[int, np.ndarray] | None = None,
) -> tuple[float, np.ndarray, list[int]]:
    """ETF loss over class representatives drawn from a batch.

    A class present in the batch is represented by the mean of its batch
    representations; an active class absent from the batch by its entry in
    ``fallbacks`` (treated as a constant).  Returns the loss, the gradient
    with respect to each batch representation and the active class list.
    """
    R = np.atleast_2d(np.asarray(representations, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    fallbacks = fallbacks or {}
    batch_classes = np.unique(y).tolist()
    active = sorted(set(batch_classes) | set(fallbacks))
    if len(active) < 2:
        raise ValueError("ETF undefined for fewer than two active classes")

    reps = []
    for c in active:
        reps.append(R[y == c].mean(axis=0) if c in batch_classes else np.asarray(fallbacks[c], dtype=np.float64))
    loss, dU = separation_loss(np.stack(reps))

    grad = np.zeros_like(R)
    for row, c in enumerate(active):
        if c in batch_classes:
            mask = y == c
            grad[mask] = dU[row] / mask.sum()
    return loss, grad, active


def targeted_binary_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    pairs: Iterable[tuple[int, int]],
    renormalize: bool = True,
) -> tuple[float, np.ndarray]:
    """Summed two-class cross-entropy over confused class pairs.

    For each pair ``(m, n)`` every sample labelled ``m`` or ``n`` adds
    ``-log p(label)``, where ``p`` is the softmax over the two logits
    ``(z_m, z_n)``.  With ``renormalize=False`` the full softmax over all
    classes is used instead.  Samples outside every pair add nothing.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    grad = np.zeros_like(z)
    loss = 0.0
    full = None if renormalize else softmax(z)
    log_full = None if renormalize else _log_softmax(z)
    for m, n in pairs:
        if m == n:
            raise ValueError("a confused pair needs two distinct classes")
        idx = np.flatnonzero((y == m) | (y == n))
        if idx.size == 0:
            continue
        yi = y[idx]
        if renormalize:
            pair = np.stack([z[idx, m], z[idx, n]], axis=1)
            is_m = (yi == m).astype(np.float64)
            log_p = _log_softmax(pair)
            loss -= float(np.sum(is_m * log_p[:, 0] + (1.0 - is_m) * log_p[:, 1]))
            p = np.exp(log_p)
            grad[idx, m] += p[:, 0] - is_m
            grad[idx, n] += p[:, 1] - (1.0 - is_m)
        else:
            loss -= float(np.sum(log_full[idx, yi]))
            g = full[idx].copy()
            g[np.arange(idx.size), yi] -= 1.0
            grad[idx] += g
    return loss, grad
