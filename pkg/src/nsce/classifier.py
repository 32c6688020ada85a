"""Prediction heads over precomputed features.

``forward`` composes an optional one-hidden-layer ReLU adapter with a linear
softmax head.  ``NcmState`` keeps momentum-updated class-mean prototypes and
predicts by nearest Euclidean prototype.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _fan_in_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LinearHead:
    W: np.ndarray  # (d_out, C); column c is w^c
    bias: np.ndarray  # (C,)

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.W.ndim != 2 or self.bias.shape != (self.W.shape[1],):
            raise ValueError("head needs W of shape (d, C) and bias of shape (C,)")

    @classmethod
    def init(cls, d: int, n_classes: int, rng: np.random.Generator) -> LinearHead:
        return cls(_fan_in_uniform(rng, d, (d, n_classes)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    def copy(self) -> LinearHead:
        return LinearHead(self.W.copy(), self.bias.copy())


@dataclass
class AdapterHead:
    """ReLU layer standing in for the trainable part of a feature extractor."""

    W1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    enabled: bool = True
    frozen: bool = False

    def __post_init__(self) -> None:
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator) -> AdapterHead:
        return cls(_fan_in_uniform(rng, d, (d, h)), np.zeros(h))

    @classmethod
    def identity(cls, d: int) -> AdapterHead:
        return cls(np.zeros((d, 0)), np.zeros(0), enabled=False)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W1.shape[1] if self.enabled else self.W1.shape[0]

    def preactivation(self, X: np.ndarray) -> np.ndarray:
        return X @ self.W1 + self.b1

    def __call__(self, X: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return X
        return np.maximum(self.preactivation(X), 0.0)

    def copy(self) -> AdapterHead:
        return AdapterHead(self.W1.copy(), self.b1.copy(), self.enabled, self.frozen)


def forward(
    features: np.ndarray, adapter: AdapterHead, head: LinearHead
) -> tuple[np.ndarray, np.ndarray]:
    """Representation and logits for one vector or a ``(n, d)`` batch."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != adapter.in_dim:
        raise ValueError(f"feature length {x.shape[-1]} != adapter input dim {adapter.in_dim}")
    rep = adapter(x)
    if rep.shape[-1] != head.W.shape[0]:
        raise ValueError(f"representation length {rep.shape[-1]} != head input dim {head.W.shape[0]}")
    return rep, rep @ head.W + head.bias


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_predict(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray | int]:
    """Stabilized softmax and argmax; ties go to the lowest class index."""
    p = softmax(logits)
    pred = np.argmax(logits, axis=-1)
    return p, int(pred) if np.ndim(pred) == 0 else pred


@dataclass
class NcmState:
    momentum: float = 0.1
    prototypes: dict[int, np.ndarray] = field(default_factory=dict)
    counts_seen: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError("NCM momentum must lie in (0, 1]")

    @property
    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def copy(self) -> NcmState:
        return NcmState(
            self.momentum,
            {c: p.copy() for c, p in self.prototypes.items()},
            dict(self.counts_seen),
        )


def update_class_means(ncm: NcmState, representations: np.ndarray, labels: np.ndarray) -> NcmState:
    """Momentum update of each batch class's prototype toward its batch mean.

    A class seen for the first time takes the batch mean directly.
    """
    R = np.atleast_2d(np.asarray(representations, dtype=np.float64))
    y = np.asarray(labels)
    lam = ncm.momentum
    for c in np.unique(y).tolist():
        members = R[y == c]
        mean = members.mean(axis=0)
        old = ncm.prototypes.get(c)
        if old is not None and old.shape != mean.shape:
            raise ValueError("representation dimension changed for an existing prototype")
        ncm.prototypes[c] = mean if old is None else (1.0 - lam) * old + lam * mean
        ncm.counts_seen[c] = ncm.counts_seen.get(c, 0) + len(members)
    return ncm


def ncm_predict(ncm: NcmState, representation: np.ndarray) -> np.ndarray | int:
    """Nearest prototype by Euclidean distance, lowest class index on ties.

    Accepts one vector or a batch; only classes with a prototype can win.
    """
    if not ncm.prototypes:
        raise ValueError("NCM has no prototypes yet")
    classes = ncm.classes
    P = np.stack([ncm.prototypes[c] for c in classes])
    R = np.asarray(representation, dtype=np.float64)
    single = R.ndim == 1
    R = np.atleast_2d(R)
    if R.shape[1] != P.shape[1]:
        raise ValueError("representation and prototype dimensions differ")
    d2 = ((R[:, None, :] - P[None, :, :]) ** 2).sum(axis=-1)
    pred = np.asarray(classes)[np.argmin(d2, axis=1)]
    return int(pred[0]) if single else pred


# -- checkpoints -------------------------------------------------------------

_PARAM_ORDER = ("W1", "b1", "W", "bias")


def save_checkpoint(
    path: str | Path, adapter: AdapterHead, head: LinearHead, seed: int
) -> Path:
    """Write ``<path>.json`` metadata and ``<path>.bin`` little-endian float64 payload."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"W1": adapter.W1, "b1": adapter.b1, "W": head.W, "bias": head.bias}
    payload = b"".join(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in _PARAM_ORDER)
    bin_path = base.with_suffix(".bin")
    bin_path.write_bytes(payload)
    meta = {
        "d": adapter.in_dim,
        "h": adapter.W1.shape[1] if adapter.enabled else 0,
        "C": head.n_classes,
        "seed": seed,
        "adapter_enabled": adapter.enabled,
        "shapes": {k: list(arrays[k].shape) for k in _PARAM_ORDER},
        "payload": bin_path.name,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    json_path = base.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2) + "\n")
    return json_path


def load_checkpoint(path: str | Path) -> tuple[AdapterHead, LinearHead, dict]:
    json_path = Path(path).with_suffix(".json")
    meta = json.loads(json_path.read_text())
    payload = (json_path.parent / meta["payload"]).read_bytes()
    if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise ValueError(f"checkpoint payload checksum mismatch: {json_path}")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, offset = {}, 0
    for k in _PARAM_ORDER:
        shape = tuple(meta["shapes"][k])
        size = int(np.prod(shape))
        arrays[k] = flat[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    adapter = AdapterHead(arrays["W1"], arrays["b1"], enabled=meta["adapter_enabled"])
    return adapter, LinearHead(arrays["W"], arrays["bias"]), meta
