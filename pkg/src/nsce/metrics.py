"""Evaluation quantities and run logs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import AdapterHead, LinearHead, NcmState, forward, ncm_predict
from .stream import ThroughputRecord


def sparsity_stats(W: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column l2 magnitude ``m(w)`` and mean-abs-to-max ratio ``s(w)``.

    Returns ``(m, s, zero_columns)``.  A zero column has ``m = 0`` and, by
    convention, ``s = 1``; it is flagged in ``zero_columns``.
    """
    W = np.asarray(W, dtype=np.float64)
    absW = np.abs(W)
    peak = absW.max(axis=0)
    zero = peak == 0
    m = np.linalg.norm(W, axis=0)
    # normalize before averaging so tiny columns do not lose precision
    scaled = np.divide(absW, peak, out=np.zeros_like(absW), where=~zero)
    s = np.where(zero, 1.0, scaled.mean(axis=0))
    return m, s, zero


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    """Row-normalized confusion matrix; rows of absent classes stay zero."""
    counts = np.zeros((n_classes, n_classes))
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


@dataclass
class EvalRecord:
    iteration: int
    samples_seen: int
    accuracy_softmax: float
    accuracy_ncm: float | None
    confusion: np.ndarray
    per_class_s: np.ndarray
    per_class_m: np.ndarray
    v_m_measured: float | None = None
    stream_position: int = 0

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "samples_seen": self.samples_seen,
            "stream_position": self.stream_position,
            "accuracy_softmax": self.accuracy_softmax,
            "accuracy_ncm": self.accuracy_ncm,
            "confusion": self.confusion.tolist(),
            "per_class_s": self.per_class_s.tolist(),
            "per_class_m": self.per_class_m.tolist(),
            "v_m_measured": self.v_m_measured,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalRecord:
        return cls(
            iteration=d["iteration"],
            samples_seen=d["samples_seen"],
            stream_position=d.get("stream_position", 0),
            accuracy_softmax=d["accuracy_softmax"],
            accuracy_ncm=d["accuracy_ncm"],
            confusion=np.asarray(d["confusion"]),
            per_class_s=np.asarray(d["per_class_s"]),
            per_class_m=np.asarray(d["per_class_m"]),
            v_m_measured=d["v_m_measured"],
        )


def evaluate(
    adapter: AdapterHead,
    head: LinearHead,
    ncm: NcmState | None,
    X: np.ndarray,
    y: np.ndarray,
    seen_classes: Sequence[int] | None = None,
    iteration: int = 0,
    samples_seen: int = 0,
) -> EvalRecord:
    """Softmax and NCM accuracy plus the softmax confusion matrix on an eval set.

    When ``seen_classes`` is given the eval set is first restricted to them.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if seen_classes is not None:
        keep = np.isin(y, np.asarray(list(seen_classes)))
        X, y = X[keep], y[keep]
    if y.size == 0:
        raise ValueError("evaluation set is empty")
    rep, logits = forward(X, adapter, head)
    pred = np.argmax(logits, axis=1)
    acc_ncm = None
    if ncm is not None and ncm.prototypes:
        acc_ncm = float(np.mean(ncm_predict(ncm, rep) == y))
    m, s, _ = sparsity_stats(head.W)
    return EvalRecord(
        iteration=iteration,
        samples_seen=samples_seen,
        accuracy_softmax=float(np.mean(pred == y)),
        accuracy_ncm=acc_ncm,
        confusion=confusion_matrix(y, pred, head.n_classes),
        per_class_s=s,
        per_class_m=m,
    )


def a_auc(records: Sequence[EvalRecord], raw: bool = False) -> float:
    """Area under the accuracy-vs-samples curve, normalized by its span.

    Each record's accuracy is weighted by the samples processed since the
    previous record, so equally spaced records reduce to the mean accuracy.
    ``raw=True`` returns the unnormalized sum.
    """
    if not records:
        raise ValueError("A_AUC needs at least one evaluation record")
    seen = np.array([r.samples_seen for r in records], dtype=np.float64)
    acc = np.array([r.accuracy_softmax for r in records], dtype=np.float64)
    spans = np.diff(seen, prepend=0.0)
    if np.any(spans <= 0):
        raise ValueError("records must be strictly increasing in samples_seen")
    area = float(np.sum(acc * spans))
    return area if raw else area / float(seen[-1])


def last_accuracy(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise ValueError("last accuracy needs at least one evaluation record")
    return records[-1].accuracy_softmax


def measure_throughput(batch_times: Sequence[float], batch_size: int) -> float:
    """Samples per second from the median batch time."""
    times = np.asarray(batch_times, dtype=np.float64)
    if times.size == 0 or np.any(times <= 0):
        raise ValueError("batch times must be a nonempty list of positive values")
    return batch_size / float(np.median(times))


@dataclass
class RunLog:
    records: list[EvalRecord] = field(default_factory=list)
    throughput: list[ThroughputRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    complete: bool = False
    checkpoint: str | None = None
    iterations: int = 0
    replay_steps: int = 0
    error: str | None = None
    task_stats: list[dict] = field(default_factory=list)
    batch_times: list[float] = field(default_factory=list)
    record_timing: bool = False
    # in-memory only, never serialized
    losses: list = field(default_factory=list, repr=False)
    model: object = field(default=None, repr=False)
    ncm: object = field(default=None, repr=False)

    def append(self, record: EvalRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("evaluation records must be strictly increasing in iteration")
        self.records.append(record)

    def summary(self) -> dict:
        out = {
            "complete": self.complete,
            "iterations": self.iterations,
            "replay_steps": self.replay_steps,
            "processed": sum(t.processed for t in self.throughput),
            "skipped": sum(t.skipped for t in self.throughput),
            "error": self.error,
            "checkpoint": self.checkpoint,
        }
        if self.records:
            out["a_auc"] = a_auc(self.records)
            out["a_auc_raw"] = a_auc(self.records, raw=True)
            out["last_accuracy"] = last_accuracy(self.records)
            out["mean_s"] = float(np.mean(self.records[-1].per_class_s))
        if self.record_timing and self.batch_times:
            out["v_m_measured"] = measure_throughput(self.batch_times, self.config.get("batch_size", 10))
        return out

    def lines(self) -> list[dict]:
        rows: list[dict] = [{"type": "config", **self.config}]
        rows += [{"type": "eval", **r.to_dict()} for r in self.records]
        rows += [{"type": "throughput", **t.to_dict()} for t in self.throughput]
        rows += [{"type": "task", **t} for t in self.task_stats]
        rows.append({"type": "summary", **self.summary()})
        return rows

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for row in self.lines():
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        return path

    def write_csv(self, path: str | Path) -> Path:
        """Plot-friendly companion: one row per evaluation."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "accuracy_softmax", "accuracy_ncm", "mean_s", "v_m"])
            for r in self.records:
                w.writerow(
                    [
                        r.iteration,
                        repr(r.accuracy_softmax),
                        "" if r.accuracy_ncm is None else repr(r.accuracy_ncm),
                        repr(float(np.mean(r.per_class_s))),
                        "" if r.v_m_measured is None else repr(r.v_m_measured),
                    ]
                )
        return path


def read_jsonl(path: str | Path) -> tuple[dict, list[EvalRecord], dict]:
    """Config echo, evaluation records and summary from a run log."""
    config, records, summary = {}, [], {}
    with Path(path).open() as fh:
        for line in fh:
            row = json.loads(line)
            kind = row.pop("type")
            if kind == "config":
                config = row
            elif kind == "eval":
                records.append(EvalRecord.from_dict(row))
            elif kind == "summary":
                summary = row
    return config, records, summary
