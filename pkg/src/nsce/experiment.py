"""Experiment orchestration: synthetic data, seed and parameter sweeps, reports.

Output layout under ``out``::

    data/...                       generated synthetic datasets
    <sweep-point>/<seed>/run.jsonl per-run log (plus run.csv and checkpoint)
    summary.csv                    mean and std over seeds per sweep point
    pacbayes.json                  bound terms per run
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import pacbayes
from .metrics import RunLog
from .stream import StreamConfig, TaskSchedule, load_dataset, split_holdout, write_dataset
from .trainer import RunConfig, TrainerConfig, run

log = logging.getLogger(__name__)

STREAM_KEYS = ("tasks", "counts", "durations", "flow_rate", "batch_size", "overlap_fraction", "mode")
POLICY_KEYS = ("buffer_size", "replay_every", "replay_batch_size")
TRAINER_KEYS = tuple(f.name for f in fields(TrainerConfig) if f.name != "seed")

DEFAULT_STREAM = {
    "tasks": [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]],
    "counts": [2000] * 5,
    "flow_rate": 100.0,
    "batch_size": 10,
    "overlap_fraction": 0.10,
    "mode": "class_incremental",
}
DEFAULT_POLICY = {"buffer_size": 100, "replay_every": 100, "replay_batch_size": 10}


# -- synthetic data ----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Gaussian clusters on per-class coordinate blocks over a shared offset.

    Class ``c`` owns ``dim // n_classes`` coordinates and its mean is raised on
    them so that any two ordinary class means lie ``separation * sigma``
    apart.  Every mean also carries ``offset`` on all coordinates, the part of
    the features that all classes share.  For each pair ``(a, b)`` in
    ``pairs`` class ``b`` is instead placed at class ``a``'s mean moved by
    ``pair_separation * sigma`` along one of ``b``'s own coordinates, which
    makes the two hard to tell apart.
    """

    n_classes: int = 10
    dim: int = 32
    separation: float = 7.5
    sigma: float = 1.0
    pairs: list[tuple[int, int]] = field(default_factory=lambda: [(0, 8), (1, 9)])
    pair_separation: float = 1.5
    n_per_class: int = 1250
    offset: float = 4.0
    seed: int | None = None  # None: follow the run seed

    def __post_init__(self) -> None:
        self.pairs = [tuple(int(c) for c in p) for p in self.pairs]
        if not self.separation > 0 or not self.sigma > 0:
            raise ValueError("separation and sigma must be positive")
        if self.pair_separation < 0:
            raise ValueError("pair_separation must be nonnegative")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.n_classes < 2 or self.dim < self.n_classes:
            raise ValueError("need at least two classes and one coordinate per class")
        moved = [b for _, b in self.pairs]
        if len(set(moved)) != len(moved):
            raise ValueError("a class can be the moved member of only one pair")
        for a, b in self.pairs:
            if a == b or not (0 <= a < self.n_classes and 0 <= b < self.n_classes):
                raise ValueError(f"invalid confusable pair {(a, b)}")
            if a in moved:
                raise ValueError("pair anchors must not themselves be moved")

    def means(self) -> np.ndarray:
        k = self.dim // self.n_classes
        height = self.separation * self.sigma / math.sqrt(2 * k)
        mus = np.full((self.n_classes, self.dim), float(self.offset))
        for c in range(self.n_classes):
            mus[c, c * k : (c + 1) * k] += height
        for a, b in self.pairs:
            mus[b] = mus[a]
            mus[b, b * k] += self.pair_separation * self.sigma
        return mus


def synthesize(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw the dataset in memory: features ``(C * n, d)`` and labels, class-ordered."""
    rng = np.random.default_rng(seed)
    mus = spec.means()
    X = np.concatenate([mu + spec.sigma * rng.normal(size=(spec.n_per_class, spec.dim)) for mu in mus])
    y = np.repeat(np.arange(spec.n_classes), spec.n_per_class)
    return X, y


def generate_synthetic(spec: SyntheticSpec, directory: str | Path, seed: int = 0, name: str = "synthetic") -> Path:
    """Write a synthetic dataset in the manifest format; returns the manifest path."""
    X, y = synthesize(spec, spec.seed if spec.seed is not None else seed)
    return write_dataset(directory, X, y, spec.n_classes, name)


# -- experiment spec ---------------------------------------------------------


@dataclass
class ExperimentSpec:
    stream: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_STREAM))
    trainer: dict[str, Any] = field(default_factory=dict)
    policy: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_POLICY))
    dataset: str | None = None
    synthetic: SyntheticSpec | None = None
    holdout: float = 0.2
    out: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])
    sweep: dict[str, list] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec(**self.synthetic)
        if "durations" in self.stream and "counts" in self.stream:
            raise ValueError("give task counts or task durations, not both")
        base = dict(DEFAULT_STREAM)
        if "durations" in self.stream:
            base.pop("counts")
        self.stream = {**base, **self.stream}
        self.policy = {**DEFAULT_POLICY, **self.policy}
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.dataset is None and self.synthetic is None:
            self.synthetic = SyntheticSpec()
        _check_keys("stream", self.stream, STREAM_KEYS)
        _check_keys("policy", self.policy, POLICY_KEYS)
        _check_keys("trainer", self.trainer, TRAINER_KEYS)
        for axis, values in self.sweep.items():
            section, _, key = axis.partition(".")
            allowed = {"stream": STREAM_KEYS, "policy": POLICY_KEYS, "trainer": TRAINER_KEYS}.get(section)
            if allowed is None or key not in allowed:
                raise ValueError(f"sweep axis {axis!r} does not name a config field")
            if not isinstance(values, list) or not values:
                raise ValueError(f"sweep axis {axis!r} needs a nonempty list of values")
        # surface bad values now rather than as failed runs
        for point in self.points():
            build_run_config(self, point, self.seeds[0])

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> ExperimentSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.synthetic is not None:
            d["synthetic"]["pairs"] = [list(p) for p in self.synthetic.pairs]
        return d

    def points(self) -> list[dict[str, Any]]:
        """Cartesian product of the sweep axes, axes in sorted order."""
        axes = sorted(self.sweep)
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.sweep[a] for a in axes))]


def _check_keys(section: str, values: dict, allowed: tuple[str, ...]) -> None:
    unknown = set(values) - set(allowed)
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")


def point_name(point: dict[str, Any]) -> str:
    if not point:
        return "base"
    return ",".join(f"{axis.partition('.')[2]}={_fmt(v)}" for axis, v in point.items())


def _fmt(v: Any) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def build_run_config(spec: ExperimentSpec, point: dict[str, Any], seed: int) -> RunConfig:
    sections = {"stream": dict(spec.stream), "trainer": dict(spec.trainer), "policy": dict(spec.policy)}
    for axis, value in point.items():
        section, _, key = axis.partition(".")
        sections[section][key] = value
    st = sections["stream"]
    if "durations" in st:
        schedule = TaskSchedule.from_durations(st["tasks"], st["durations"], st["flow_rate"], st["overlap_fraction"])
    else:
        schedule = TaskSchedule.from_counts(st["tasks"], st["counts"], st["flow_rate"], st["overlap_fraction"])
    stream = StreamConfig(schedule, float(st["flow_rate"]), int(st["batch_size"]), seed, st["mode"])
    trainer = TrainerConfig(**sections["trainer"], seed=seed)
    return RunConfig(stream, trainer, **sections["policy"])


# -- running -----------------------------------------------------------------


@dataclass
class RunResult:
    point: str
    axes: dict[str, Any]
    seed: int
    log: RunLog
    bound: dict | None


def _dataset_for(spec: ExperimentSpec, out: Path, seed: int):
    if spec.dataset is not None:
        samples, _, _ = load_dataset(spec.dataset)
        return samples
    syn = spec.synthetic
    data_seed = syn.seed if syn.seed is not None else seed
    manifest = out / "data" / f"seed-{data_seed}" / "synthetic.json"
    if not manifest.exists():
        generate_synthetic(syn, manifest.parent, data_seed)
    samples, _, _ = load_dataset(manifest)
    return samples


def bound_report(runlog: RunLog, cfg: TrainerConfig) -> dict:
    """Bound terms at the configured lambda and at the best grid lambda.

    Uses ``m_t`` = processed samples, the 0-1 risk of each task-end model on
    its task's processed samples (so ``K = 1``) and the Gaussian KL proxy.
    """
    stats = runlog.task_stats
    report: dict[str, Any] = {
        "m": [s["m"] for s in stats],
        "empirical_risk": [s["empirical_risk"] for s in stats],
        "kl": [s["kl"] for s in stats],
        "K": 1.0,
        "delta": cfg.pb_delta,
        "half_factor": cfg.pb_half_factor,
        "posterior": pacbayes.POSTERIOR_PROXY,
    }
    if not stats or any(s["m"] < 1 or s["empirical_risk"] is None for s in stats):
        report["error"] = "a task processed no samples; bound undefined"
        return report
    inputs = pacbayes.BoundInputs(
        1.0, cfg.pb_lambda, cfg.pb_delta, report["m"], report["empirical_risk"], report["kl"], cfg.pb_half_factor
    )
    report["configured"] = pacbayes.bound_terms(inputs).to_dict()
    report["grid_best"] = pacbayes.best_lambda(inputs).to_dict()
    return report


def run_one(spec: ExperimentSpec, point: dict[str, Any], seed: int) -> RunResult:
    out = Path(spec.out)
    name = point_name(point)
    run_dir = out / name / str(seed)
    cfg = None
    try:
        cfg = build_run_config(spec, point, seed)
        samples = _dataset_for(spec, out, seed)
        train, held = split_holdout(samples, spec.holdout, seed)
        runlog = run(cfg, train, held, checkpoint_path=run_dir / "model")
    except Exception as exc:  # config or data failure before the run could start
        log.error("run %s/%s failed: %s", name, seed, exc)
        runlog = RunLog(config=cfg.to_dict() if cfg else {}, error=f"{type(exc).__name__}: {exc}")
    runlog.write_jsonl(run_dir / "run.jsonl")
    runlog.write_csv(run_dir / "run.csv")
    bound = bound_report(runlog, cfg.trainer) if cfg is not None and runlog.complete else None
    return RunResult(name, point, seed, runlog, bound)


SUMMARY_METRICS = ("a_auc", "last_accuracy", "mean_s", "processed", "skipped", "v_m")
BOUND_METRICS = ("empirical_risk", "throughput", "divergence", "constant", "total")


def _run_metrics(r: RunResult) -> dict[str, float | None]:
    s = r.log.summary()
    v_m = s.get("v_m_measured", r.log.config.get("trainer", {}).get("model_throughput"))
    out = {k: s.get(k) for k in SUMMARY_METRICS if k != "v_m"}
    out["v_m"] = v_m
    terms = (r.bound or {}).get("configured") or {}
    for k in BOUND_METRICS:
        out[f"bound_{k}"] = terms.get(k)
    return out


def _mean_std(values: list[float | None]) -> tuple[str, str]:
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return "", ""
    arr = np.asarray(vals)
    return repr(float(arr.mean())), repr(float(arr.std()))


def summary_rows(results: list[RunResult], axes: list[str]) -> tuple[list[str], list[list[str]]]:
    """Header and one row per sweep point: mean and population std over seeds."""
    metric_names = [k for k in SUMMARY_METRICS] + [f"bound_{k}" for k in BOUND_METRICS]
    header = ["sweep_point", *axes, "n_seeds", "n_complete"]
    for k in metric_names:
        header += [f"{k}_mean", f"{k}_std"]
    rows = []
    by_point: dict[str, list[RunResult]] = {}
    for r in results:
        by_point.setdefault(r.point, []).append(r)
    for name, group in by_point.items():
        metrics = [_run_metrics(r) for r in group]
        row = [name, *(_fmt(group[0].axes[a]) for a in axes), str(len(group))]
        row.append(str(sum(r.log.complete for r in group)))
        for k in metric_names:
            row += list(_mean_std([m[k] for m in metrics if m[k] is not None]))
        rows.append(row)
    return header, rows


def write_summary(results: list[RunResult], axes: list[str], path: Path) -> Path:
    header, rows = summary_rows(results, axes)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_pacbayes(results: list[RunResult], path: Path) -> Path:
    doc = {
        "note": "diagnostic bound terms; divergence uses a Gaussian proxy posterior",
        "lambda_grid": list(pacbayes.LAMBDA_GRID),
        "runs": [{"sweep_point": r.point, "seed": r.seed, **(r.bound or {"error": r.log.error})} for r in results],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def run_experiment(spec: ExperimentSpec) -> int:
    """Run every (sweep point, seed) pair and write all artifacts.

    Returns 0 when every run completed and 1 otherwise.
    """
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    results = []
    for point in spec.points():
        for seed in spec.seeds:
            r = run_one(spec, point, seed)
            log.info("%s seed %d: complete=%s %s", r.point, seed, r.log.complete, r.log.error or "")
            results.append(r)
    write_summary(results, sorted(spec.sweep), out / "summary.csv")
    write_pacbayes(results, out / "pacbayes.json")
    return 0 if all(r.log.complete for r in results) else 1
