"""Reservoir memory buffer and the replay access budget."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .stream import Sample, stack


class AccessDeniedError(RuntimeError):
    """Replay data requested outside a granted access."""


class MemoryBuffer:
    """Fixed-capacity reservoir of past samples.

    After ``seen_count`` offers every offered sample resides in the buffer
    with probability ``capacity / seen_count``.
    """

    def __init__(self, capacity: int, seed: int = 0) -> None:
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self.seed = seed
        self.contents: list[Sample] = []
        self.seen_count = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.contents)

    def update(self, batch: list[Sample]) -> MemoryBuffer:
        for s in batch:
            self.seen_count += 1
            if len(self.contents) < self.capacity:
                self.contents.append(s)
            else:
                j = int(self._rng.integers(self.seen_count))
                if j < self.capacity:
                    self.contents[j] = s
        return self

    def labels(self) -> np.ndarray:
        return np.fromiter((s.label for s in self.contents), dtype=np.int64, count=len(self))

    def snapshot(self) -> tuple[Sample, ...]:
        return tuple(self.contents)

    def save(self, directory: str | Path, name: str = "buffer") -> Path:
        """Checkpoint contents, counters and RNG state; returns the manifest path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        X, y = stack(self.contents)
        d = int(X.shape[1]) if len(self) else 0
        np.asarray(X, dtype="<f8").tofile(directory / f"{name}.features.f64")
        np.asarray(y, dtype="<u4").tofile(directory / f"{name}.labels.u32")
        meta = {
            "capacity": self.capacity,
            "seed": self.seed,
            "seen_count": self.seen_count,
            "n": len(self),
            "d": d,
            "task_ids": [s.task_id for s in self.contents],
            "arrival_indices": [s.arrival_index for s in self.contents],
            "feature_file": f"{name}.features.f64",
            "label_file": f"{name}.labels.u32",
            "rng_state": self._rng.bit_generator.state,
        }
        path = directory / f"{name}.json"
        path.write_text(json.dumps(meta, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, manifest_path: str | Path) -> MemoryBuffer:
        path = Path(manifest_path)
        meta = json.loads(path.read_text())
        buf = cls(meta["capacity"], meta["seed"])
        n, d = meta["n"], meta["d"]
        X = np.fromfile(path.parent / meta["feature_file"], dtype="<f8").reshape(n, d)
        y = np.fromfile(path.parent / meta["label_file"], dtype="<u4")
        buf.contents = [
            Sample(X[i].copy(), int(y[i]), task_id=t, arrival_index=a)
            for i, (t, a) in enumerate(zip(meta["task_ids"], meta["arrival_indices"]))
        ]
        buf.seen_count = meta["seen_count"]
        buf._rng.bit_generator.state = meta["rng_state"]
        return buf


@dataclass
class AccessPolicy:
    """One buffer access per ``every`` training iterations."""

    every: int = 100
    replay_batch_size: int = 10
    accesses_used: int = 0
    _last_iteration: int = field(default=0, repr=False)
    _open: int | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.every < 1 or self.replay_batch_size < 1:
            raise ValueError("access period and replay batch size must be positive")

    @property
    def frequency(self) -> Fraction:
        return Fraction(1, self.every)

    @property
    def is_open(self) -> bool:
        return self._open is not None

    def may_access(self, iteration: int) -> bool:
        if iteration < self._last_iteration:
            raise ValueError("iterations must be nondecreasing")
        self._last_iteration = iteration
        granted = iteration > 0 and iteration % self.every == 0
        if granted and self._open != iteration:
            self.accesses_used += 1
        self._open = iteration if granted else None
        return granted


def may_access(policy: AccessPolicy, iteration: int) -> bool:
    return policy.may_access(iteration)


def sample_for_replay(
    buffer: MemoryBuffer,
    policy: AccessPolicy,
    class_pair_filter: tuple[int, int] | None = None,
) -> list[Sample]:
    """Draw up to ``replay_batch_size`` distinct buffer samples.

    With a class pair ``(m, n)`` only those two labels are drawn, alternating
    between them; once one class runs out the other fills the remainder.
    """
    if not policy.is_open:
        raise AccessDeniedError("buffer access not granted at this iteration")
    rng = buffer._rng
    k = policy.replay_batch_size
    if class_pair_filter is None:
        idx = rng.permutation(len(buffer))[:k]
        return [buffer.contents[i] for i in idx]

    m, n = class_pair_filter
    labels = buffer.labels()
    queues = [
        rng.permutation(np.flatnonzero(labels == m)).tolist(),
        rng.permutation(np.flatnonzero(labels == n)).tolist(),
    ]
    picked: list[int] = []
    turn = 0
    while len(picked) < k and (queues[0] or queues[1]):
        if not queues[turn]:
            turn = 1 - turn
        picked.append(queues[turn].pop(0))
        turn = 1 - turn
    return [buffer.contents[i] for i in picked]
