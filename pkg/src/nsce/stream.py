"""Feature datasets, task-structured streams and flow-rate simulation.

A stream emits samples at a fixed flow rate ``v_s``: the ``k``-th sample
arrives at ``k / v_s`` seconds.  A model consumes batches at its own
throughput ``v_m``; whenever it falls behind, the backlog beyond one batch is
dropped oldest-first and never revisited.  Over a task of duration ``Δ_t``
this leaves ``min(v_s, v_m) * Δ_t`` processed samples, up to one batch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MODES = ("single_task", "class_incremental", "domain_incremental")

# Half of the boundary window taken from each side of a task boundary.
BOUNDARY_HALF_WIDTH = 0.05


class DatasetError(ValueError):
    """Malformed dataset payload or a schedule that does not fit it."""


@dataclass(frozen=True, eq=False)
class Sample:
    features: np.ndarray
    label: int
    task_id: int = 0
    arrival_index: int = 0

    def __post_init__(self) -> None:
        if self.features.ndim != 1:
            raise DatasetError("sample features must be a vector")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("sample features must be finite")
        if self.label < 0 or self.task_id < 0 or self.arrival_index < 0:
            raise DatasetError("label, task_id and arrival_index must be nonnegative")


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Features as an ``(n, d)`` float64 matrix and labels as an int array."""
    if not samples:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    X = np.stack([s.features for s in samples]).astype(np.float64, copy=False)
    y = np.fromiter((s.label for s in samples), dtype=np.int64, count=len(samples))
    return X, y


# -- dataset I/O -------------------------------------------------------------


def load_dataset(manifest_path: str | Path) -> tuple[list[Sample], int, int]:
    """Read a dataset described by a JSON manifest or a CSV file.

    The manifest holds ``{n, d, C, feature_file, label_file}``; the feature
    file is row-major little-endian float32, the label file little-endian
    uint32.  Paths inside the manifest are relative to the manifest.  A
    ``.csv`` path is read directly with header ``f0..f{d-1},label`` and C is
    inferred as ``max(label) + 1``.
    """
    path = Path(manifest_path)
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    if path.suffix.lower() == ".csv":
        return _load_csv(path)

    meta = json.loads(path.read_text())
    try:
        n, d, C = int(meta["n"]), int(meta["d"]), int(meta["C"])
        feature_file = path.parent / meta["feature_file"]
        label_file = path.parent / meta["label_file"]
    except KeyError as exc:
        raise DatasetError(f"manifest missing key {exc}") from None
    for f in (feature_file, label_file):
        if not f.exists():
            raise FileNotFoundError(f"dataset payload not found: {f}")

    raw = np.fromfile(feature_file, dtype="<f4")
    labels = np.fromfile(label_file, dtype="<u4")
    if labels.size != n:
        raise DatasetError(f"label file holds {labels.size} entries, manifest declares n={n}")
    if raw.size != n * d:
        raise DatasetError(
            f"feature file holds {raw.size} values, manifest declares n*d={n}*{d}={n * d}"
        )
    X = raw.reshape(n, d)
    return _to_samples(X, labels.astype(np.int64), C), d, C


def _load_csv(path: Path) -> tuple[list[Sample], int, int]:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise DatasetError("CSV header must be f0..f{d-1},label")
        d = len(header) - 1
        if header[:-1] != [f"f{i}" for i in range(d)]:
            raise DatasetError("CSV header must be f0..f{d-1},label")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise DatasetError(f"line {lineno}: expected {d + 1} fields, got {len(row)}")
            rows.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    y = np.asarray(labels, dtype=np.int64)
    C = int(y.max()) + 1 if y.size else 0
    return _to_samples(X, y, C), d, C


def _to_samples(X: np.ndarray, y: np.ndarray, C: int) -> list[Sample]:
    if not np.all(np.isfinite(X)):
        bad = int(np.argwhere(~np.isfinite(X))[0, 0])
        raise DatasetError(f"non-finite feature value in row {bad}")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise DatasetError(f"labels must lie in [0, {C})")
    X = X.astype(np.float64)
    return [Sample(X[i], int(y[i])) for i in range(len(y))]


def write_dataset(
    directory: str | Path, X: np.ndarray, y: np.ndarray, n_classes: int, name: str = "data"
) -> Path:
    """Write features/labels in the binary manifest format; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DatasetError("features must be (n, d) with one label per row")
    feature_file, label_file = f"{name}.features.f32", f"{name}.labels.u32"
    X.astype("<f4").tofile(directory / feature_file)
    y.astype("<u4").tofile(directory / label_file)
    manifest = {
        "n": int(X.shape[0]),
        "d": int(X.shape[1]),
        "C": int(n_classes),
        "feature_file": feature_file,
        "label_file": label_file,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def split_holdout(
    samples: Sequence[Sample], fraction: float = 0.2, seed: int = 0
) -> tuple[list[Sample], list[Sample]]:
    """Split off ``fraction`` of every class as a fixed evaluation set.

    Returns ``(train, held_out)``, both in original file order.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("holdout fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    held = set()
    for c in sorted(by_class):
        idx = np.asarray(by_class[c])
        k = int(round(fraction * idx.size))
        held.update(rng.permutation(idx)[:k].tolist())
    train = [s for i, s in enumerate(samples) if i not in held]
    test = [s for i, s in enumerate(samples) if i in held]
    return train, test


# -- schedules ---------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    classes: tuple[int, ...]
    n_samples: int
    duration: float

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValueError("task class set must be nonempty")
        if self.n_samples <= 0:
            raise ValueError("task sample count must be positive")
        if not self.duration > 0:
            raise ValueError("task duration must be positive")


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple[Task, ...]
    overlap_fraction: float = 0.10

    def __post_init__(self) -> None:
        if not self.tasks:
            raise ValueError("schedule needs at least one task")
        if not 0.0 <= self.overlap_fraction < 0.5:
            raise ValueError("overlap_fraction must lie in [0, 0.5)")
        union = set().union(*(t.classes for t in self.tasks))
        if union != set(range(len(union))):
            raise ValueError("union of task class sets must be {0..C-1}")

    @property
    def n_classes(self) -> int:
        return len(set().union(*(t.classes for t in self.tasks)))

    @property
    def counts(self) -> list[int]:
        return [t.n_samples for t in self.tasks]

    @classmethod
    def from_counts(
        cls,
        class_sets: Iterable[Iterable[int]],
        counts: Iterable[int],
        flow_rate: float,
        overlap_fraction: float = 0.10,
    ) -> TaskSchedule:
        """Schedule whose durations follow from the counts: ``Δ_t = N_t / v_s``."""
        tasks = tuple(
            Task(tuple(sorted(cs)), int(n), int(n) / flow_rate)
            for cs, n in zip(class_sets, counts, strict=True)
        )
        return cls(tasks, overlap_fraction)

    @classmethod
    def from_durations(
        cls,
        class_sets: Iterable[Iterable[int]],
        durations: Iterable[float],
        flow_rate: float,
        overlap_fraction: float = 0.10,
    ) -> TaskSchedule:
        """Schedule whose counts follow from the durations: ``N_t = v_s Δ_t``."""
        tasks = tuple(
            Task(tuple(sorted(cs)), int(round(flow_rate * dt)), float(dt))
            for cs, dt in zip(class_sets, durations, strict=True)
        )
        return cls(tasks, overlap_fraction)


@dataclass(frozen=True)
class StreamConfig:
    schedule: TaskSchedule
    flow_rate: float
    batch_size: int = 10
    seed: int = 0
    mode: str = "class_incremental"

    def __post_init__(self) -> None:
        if not self.flow_rate > 0:
            raise ValueError("flow rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for t, task in enumerate(self.schedule.tasks):
            if abs(task.n_samples - self.flow_rate * task.duration) >= 1.0:
                raise ValueError(
                    f"task {t}: N_t={task.n_samples} inconsistent with "
                    f"v_s*Δ_t={self.flow_rate * task.duration:g}"
                )
        if self.mode == "class_incremental":
            seen: set[int] = set()
            for task in self.schedule.tasks:
                if seen & set(task.classes):
                    raise ValueError("class_incremental tasks must have disjoint class sets")
                seen |= set(task.classes)


@dataclass
class Stream:
    """A generated stream: samples in arrival order plus task slot layout."""

    samples: list[Sample]
    flow_rate: Fraction
    slot_starts: list[int]
    durations: list[float]
    overlap_fraction: float = 0.0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_slots(self) -> int:
        return len(self.slot_starts)

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.samples), dtype=np.float64) / float(self.flow_rate)

    def timestamp(self, k: int) -> Fraction:
        return Fraction(k) / self.flow_rate

    def slot_of(self, k: int) -> int:
        """Scheduled task whose time slot contains stream position ``k``."""
        lo, hi = 0, len(self.slot_starts) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.slot_starts[mid] <= k:
                lo = mid
            else:
                hi = mid - 1
        return lo

    def slot_range(self, t: int) -> range:
        stop = self.slot_starts[t + 1] if t + 1 < len(self.slot_starts) else len(self.samples)
        return range(self.slot_starts[t], stop)

    def boundary_windows(self) -> list[range]:
        """Stream positions where cross-task mixing is allowed."""
        windows = []
        for t in range(1, self.n_slots):
            a = _half_window(len(self.slot_range(t - 1)))
            b = _half_window(len(self.slot_range(t)))
            s = self.slot_starts[t]
            windows.append(range(s - a, s + b))
        return windows


def _half_window(n: int) -> int:
    return int(round(BOUNDARY_HALF_WIDTH * n))


def _as_fraction(x: float | int | Fraction) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(x).limit_denominator(10**9)


def build_stream(cfg: StreamConfig, samples: Sequence[Sample]) -> Stream:
    """Lay out ``samples`` as a task-ordered stream with blurry boundaries.

    Each task draws ``N_t`` samples without replacement from the pool of its
    classes (in ``domain_incremental`` mode a class shared by several tasks is
    split between them in file order).  Across each boundary, a window made of
    the last 5% of the earlier task and the first 5% of the later one mixes in
    samples of the adjacent task: a fixed number of random swaps makes an
    ``overlap_fraction`` share of the window cross-task, so task sizes hold.
    The result depends only on ``cfg`` and ``samples``.
    """
    schedule = cfg.schedule
    rng = np.random.default_rng(cfg.seed)

    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    for c in range(schedule.n_classes):
        if c not in by_class:
            raise DatasetError(f"schedule references class {c} absent from the samples")

    if cfg.mode == "single_task":
        order = _single_task_order(schedule, by_class, rng)
        sources = [0] * len(order)
        slot_starts = [0]
        durations = [sum(t.duration for t in schedule.tasks)]
        overlap = 0.0
    else:
        pools = _task_pools(cfg, by_class)
        order, sources, slot_starts = [], [], []
        for t, (task, pool) in enumerate(zip(schedule.tasks, pools)):
            if task.n_samples > len(pool):
                raise DatasetError(
                    f"task {t} needs {task.n_samples} samples, its classes hold {len(pool)}"
                )
            slot_starts.append(len(order))
            order.extend(rng.permutation(np.asarray(pool))[: task.n_samples].tolist())
            sources.extend([t] * task.n_samples)
        durations = [t.duration for t in schedule.tasks]
        overlap = schedule.overlap_fraction
        _blur_boundaries(order, sources, slot_starts, overlap, rng)

    emitted = [
        Sample(samples[i].features, samples[i].label, task_id=src, arrival_index=k)
        for k, (i, src) in enumerate(zip(order, sources))
    ]
    return Stream(emitted, _as_fraction(cfg.flow_rate), slot_starts, durations, overlap)


def _single_task_order(
    schedule: TaskSchedule, by_class: dict[int, list[int]], rng: np.random.Generator
) -> list[int]:
    total = sum(schedule.counts)
    queues = {c: rng.permutation(np.asarray(by_class[c])).tolist() for c in sorted(by_class)}
    queues = {c: q for c, q in queues.items() if c < schedule.n_classes}
    if total > sum(len(q) for q in queues.values()):
        raise DatasetError("single_task stream needs more samples than the dataset holds")
    order: list[int] = []
    live = sorted(queues)
    while len(order) < total:
        c = live[int(rng.integers(len(live)))]
        order.append(queues[c].pop())
        if not queues[c]:
            live.remove(c)
    return order


def _task_pools(cfg: StreamConfig, by_class: dict[int, list[int]]) -> list[list[int]]:
    tasks = cfg.schedule.tasks
    owners: dict[int, list[int]] = {}
    for t, task in enumerate(tasks):
        for c in task.classes:
            owners.setdefault(c, []).append(t)
    pools: list[list[int]] = [[] for _ in tasks]
    for c, ts in owners.items():
        chunks = np.array_split(np.asarray(by_class[c]), len(ts))
        for t, chunk in zip(ts, chunks):
            pools[t].extend(chunk.tolist())
    return [sorted(p) for p in pools]


def _blur_boundaries(
    order: list[int],
    sources: list[int],
    slot_starts: list[int],
    overlap: float,
    rng: np.random.Generator,
) -> None:
    if overlap <= 0:
        return
    ends = slot_starts[1:] + [len(order)]
    for t in range(1, len(slot_starts)):
        a = _half_window(ends[t - 1] - slot_starts[t - 1])
        b = _half_window(ends[t] - slot_starts[t])
        pairs = min(a, b)
        if pairs == 0:
            continue
        s = slot_starts[t]
        # Each swap makes two positions cross-task.  A fixed swap count puts
        # round(overlap * (a + b)) cross-task samples in the window at
        # uniformly random positions, so each position is cross-task with
        # probability `overlap` and the count does not fluctuate.
        swaps = min(pairs, int(round(overlap * (a + b) / 2)))
        tail = rng.permutation(np.arange(s - a, s))[:swaps]
        head = rng.permutation(np.arange(s, s + b))[:swaps]
        for i, j in zip(tail.tolist(), head.tolist()):
            order[i], order[j] = order[j], order[i]
            sources[i], sources[j] = sources[j], sources[i]


# -- throughput simulation ---------------------------------------------------


@dataclass
class ThroughputRecord:
    task_id: int
    arrived: int = 0
    processed: int = 0
    skipped: int = 0
    measured_v_m: float | None = None

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "arrived": self.arrived,
            "processed": self.processed,
            "skipped": self.skipped,
            "measured_v_m": self.measured_v_m,
        }


@dataclass
class StreamCursor:
    """Consumption state of one stream.  Owned by a single training loop."""

    stream: Stream
    batch_size: int = 10
    position: int = 0
    free_at: Fraction = Fraction(0)
    start_time: Fraction = Fraction(0)
    processed: list[int] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.processed = [0] * self.stream.n_slots
        self.skipped = [0] * self.stream.n_slots

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self.stream)

    def arrived_by(self, t: Fraction) -> int:
        if t < 0:
            return 0
        return min(len(self.stream), math.floor(t * self.stream.flow_rate) + 1)

    def drain_batch(
        self, v_m: float | None, wall_clock: float | Fraction | None = None
    ) -> tuple[list[Sample], int]:
        """Next batch once the model is free at ``wall_clock``.

        ``wall_clock`` defaults to the moment the previous batch finished
        under throughput ``v_m``.  If fewer than ``batch_size`` samples are
        waiting, the model idles until they arrive.  A backlog beyond one
        batch is dropped oldest-first and reported as ``skipped``.  No batch
        starts at or after the end of the stream (``n / v_s``); whatever is
        still waiting then is skipped and an empty batch is returned.
        ``v_m`` of ``None`` means training takes no simulated time.
        """
        if v_m is not None and not v_m > 0:
            raise ValueError("model throughput must be positive")
        n = len(self.stream)
        if self.position >= n:
            return [], 0
        t = self.free_at if wall_clock is None else _as_fraction(wall_clock)
        if t >= n / self.stream.flow_rate:
            for k in range(self.position, n):
                self.skipped[self.stream.slot_of(k)] += 1
            late, self.position = n - self.position, n
            return [], late
        arrived = self.arrived_by(t)
        if arrived - self.position < self.batch_size and arrived < n:
            last = min(self.position + self.batch_size, n) - 1
            t = max(t, self.stream.timestamp(last))
            arrived = last + 1
        skip = max(0, arrived - self.position - self.batch_size)
        for k in range(self.position, self.position + skip):
            self.skipped[self.stream.slot_of(k)] += 1
        batch = self.stream.samples[self.position + skip : arrived]
        for s in batch:
            self.processed[self.stream.slot_of(s.arrival_index)] += 1
        self.position = arrived
        self.start_time = t
        busy = Fraction(0) if v_m is None else Fraction(len(batch)) / _as_fraction(v_m)
        self.free_at = t + busy
        return batch, skip

    def records(self, measured_v_m: Sequence[float | None] | None = None) -> list[ThroughputRecord]:
        out = []
        for t in range(self.stream.n_slots):
            out.append(
                ThroughputRecord(
                    task_id=t,
                    arrived=self.processed[t] + self.skipped[t],
                    processed=self.processed[t],
                    skipped=self.skipped[t],
                    measured_v_m=None if measured_v_m is None else measured_v_m[t],
                )
            )
        return out


def drain_batch(
    cursor: StreamCursor, v_m: float | None, wall_clock: float | Fraction | None = None
) -> tuple[list[Sample], int]:
    return cursor.drain_batch(v_m, wall_clock)


def simulate_throughput(stream: Stream, v_m: float | None, batch_size: int = 10) -> list[ThroughputRecord]:
    """Drain a whole stream at constant throughput without training."""
    cursor = StreamCursor(stream, batch_size)
    while cursor.drain_batch(v_m)[0]:
        pass
    return cursor.records()
