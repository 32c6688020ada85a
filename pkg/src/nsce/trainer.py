"""Streaming training loop for the non-sparse classifier objective.

Per incoming batch: reservoir update, optional freeze of the adapter once
the running current-task NCM accuracy passes a threshold, one AdamW step on
``ce + gamma * (lp + ls)``, and, when the access budget allows, one replay
step that targets confused class pairs from the memory buffer.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import (
    AdapterHead,
    LinearHead,
    NcmState,
    forward,
    ncm_predict,
    save_checkpoint,
    update_class_means,
)
from .losses import (
    LossBreakdown,
    cross_entropy,
    max_separation,
    sparsity_regularizer,
    targeted_binary_loss,
    total_loss,
)
from .memory import AccessPolicy, MemoryBuffer, sample_for_replay
from .metrics import RunLog, confusion_matrix, evaluate, measure_throughput
from .pacbayes import gaussian_kl
from .stream import Sample, StreamConfig, StreamCursor, build_stream, stack

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, value: float) -> None:
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainerConfig:
    gamma: float = 0.01
    tau: float = 0.2
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lite_mode: bool = False
    lite_threshold: float = 0.9
    lite_latch: bool = True
    acc_decay: float = 0.9
    ncm_momentum: float = 0.1
    adapter_hidden: int = 0  # 0 disables the adapter
    targeted_replay: bool = True
    pair_renormalize: bool = True
    eval_interval: int = 100
    model_throughput: float | None = None  # None: training takes no stream time
    throughput_mode: str = "simulated"  # or "measured"
    seed: int = 0
    kl_sigma: float = 0.1
    pb_lambda: float = 1.0
    pb_delta: float = 0.05
    pb_half_factor: bool = True

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.lite_threshold < 1:
            raise ValueError("lite_threshold must lie in (0, 1)")
        if self.throughput_mode not in ("simulated", "measured"):
            raise ValueError("throughput_mode must be 'simulated' or 'measured'")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


class AdamW:
    """Adaptive moments with decoupled weight decay, one state per named parameter."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], skip: Sequence[str] = ()) -> None:
        for name, g in grads.items():
            if name in skip:
                continue
            p = params[name]
            st = self.state.setdefault(name, {"t": 0, "m": np.zeros_like(p), "v": np.zeros_like(p)})
            st["t"] += 1
            t = st["t"]
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / (1.0 - self.beta1**t)
            v_hat = st["v"] / (1.0 - self.beta2**t)
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Model:
    adapter: AdapterHead
    head: LinearHead

    @classmethod
    def init(cls, d: int, n_classes: int, hidden: int = 0, seed: int = 0) -> Model:
        rng = np.random.default_rng(seed)
        adapter = AdapterHead.init(d, hidden, rng) if hidden > 0 else AdapterHead.identity(d)
        head = LinearHead.init(adapter.out_dim, n_classes, rng)
        return cls(adapter, head)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"W": self.head.W, "bias": self.head.bias}
        if self.adapter.enabled:
            params["W1"] = self.adapter.W1
            params["b1"] = self.adapter.b1
        return params

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in sorted(self.parameters().items())])

    def adapter_checksum(self) -> bytes:
        return self.adapter.W1.tobytes() + self.adapter.b1.tobytes()


def _backprop(
    model: Model, X: np.ndarray, rep: np.ndarray, dlogits: np.ndarray, drep_extra: np.ndarray | None = None
) -> dict[str, np.ndarray]:
    grads = {"W": rep.T @ dlogits, "bias": dlogits.sum(axis=0)}
    if model.adapter.enabled:
        drep = dlogits @ model.head.W.T
        if drep_extra is not None:
            drep = drep + drep_extra
        # ReLU subgradient is 0 at the kink
        dpre = drep * (model.adapter.preactivation(X) > 0)
        grads["W1"] = X.T @ dpre
        grads["b1"] = dpre.sum(axis=0)
    return grads


def objective(
    model: Model,
    X: np.ndarray,
    y: np.ndarray,
    fallbacks: dict[int, np.ndarray] | None,
    gamma: float,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Batch loss ``ce + gamma * (lp + ls)`` and its gradients.

    ``fallbacks`` supplies constant representatives for active classes that
    are missing from the batch.  The separation term is skipped (zero) while
    fewer than two classes are active.
    """
    rep, logits = forward(X, model.adapter, model.head)
    ce, dlogits = cross_entropy(logits, y)
    ls, dW_s = sparsity_regularizer(model.head.W)
    lp, drep_p = 0.0, None
    active = set(np.unique(y).tolist()) | set(fallbacks or {})
    if len(active) >= 2:
        lp, drep_p, _ = max_separation(rep, y, fallbacks)
    drep_extra = None if drep_p is None else gamma * drep_p
    grads = _backprop(model, X, rep, dlogits, drep_extra)
    grads["W"] = grads["W"] + gamma * dW_s
    loss = LossBreakdown(ce=ce, ls=ls, lp=lp, lb=0.0, total=total_loss(ce, ls, lp, gamma), gamma=gamma)
    return loss, grads


def replay_objective(
    model: Model, X: np.ndarray, y: np.ndarray, pairs: Sequence[tuple[int, int]], renormalize: bool = True
) -> tuple[float, dict[str, np.ndarray]]:
    rep, logits = forward(X, model.adapter, model.head)
    lb, dlogits = targeted_binary_loss(logits, y, pairs, renormalize)
    return lb, _backprop(model, X, rep, dlogits)


@dataclass
class StepResult:
    loss: LossBreakdown
    batch_time: float
    ncm_accuracy: float


def train_step(
    model: Model,
    X: np.ndarray,
    y: np.ndarray,
    ncm: NcmState,
    cfg: TrainerConfig,
    optimizer: AdamW,
    iteration: int = 0,
) -> StepResult:
    """One optimizer step on an incoming batch; updates prototypes in place."""
    if len(y) == 0:
        raise ValueError("train_step needs a nonempty batch")
    start = time.perf_counter()
    rep, _ = forward(X, model.adapter, model.head)
    update_class_means(ncm, rep, y)
    batch_classes = set(np.unique(y).tolist())
    fallbacks = {c: p for c, p in ncm.prototypes.items() if c not in batch_classes}
    loss, grads = objective(model, X, y, fallbacks, cfg.gamma)
    if not np.isfinite(loss.total):
        raise NonFiniteLossError(iteration, loss.total)
    skip = ("W1", "b1") if model.adapter.frozen else ()
    optimizer.step(model.parameters(), grads, skip)
    ncm_acc = float(np.mean(ncm_predict(ncm, rep) == y))
    return StepResult(loss, time.perf_counter() - start, ncm_acc)


class LiteGate:
    """Freeze decision for the adapter, latched until the next task boundary."""

    def __init__(self, enabled: bool, threshold: float = 0.9, latch: bool = True) -> None:
        self.enabled = enabled
        self.threshold = threshold
        self.latch = latch
        self.fired = False

    def update(self, running_task_accuracy: float) -> bool:
        if not self.enabled:
            return False
        above = running_task_accuracy > self.threshold
        self.fired = (self.fired or above) if self.latch else above
        return self.fired

    def reset(self) -> None:
        self.fired = False


def lite_gate(running_task_accuracy: float, cfg: TrainerConfig, gate: LiteGate | None = None) -> bool:
    gate = gate or LiteGate(cfg.lite_mode, cfg.lite_threshold, cfg.lite_latch)
    return gate.update(running_task_accuracy)


def confused_pairs(confusion: np.ndarray, tau: float) -> list[tuple[int, int]]:
    """Off-diagonal ``(m, n)`` whose row-normalized rate exceeds ``tau``."""
    C = np.asarray(confusion)
    mask = C > tau
    np.fill_diagonal(mask, False)
    return [(int(m), int(n)) for m, n in zip(*np.nonzero(mask))]


def replay_step(
    model: Model,
    buffer: MemoryBuffer,
    policy: AccessPolicy,
    cfg: TrainerConfig,
    optimizer: AdamW,
) -> tuple[list[tuple[int, int]], LossBreakdown | None]:
    """Confusion-targeted replay on a granted buffer access.

    The confusion matrix of the softmax head is computed over the whole
    buffer.  Each pair above ``tau`` gets its own filtered replay batch and
    one update is taken on the summed binary loss.  Without such pairs (or
    with targeting disabled) a plain cross-entropy update on a uniform replay
    batch is taken instead.
    """
    if len(buffer) == 0:
        log.warning("replay requested on an empty buffer; skipping")
        return [], None
    skip = ("W1", "b1") if model.adapter.frozen else ()
    pairs: list[tuple[int, int]] = []
    if cfg.targeted_replay:
        Xb, yb = stack(buffer.contents)
        _, logits = forward(Xb, model.adapter, model.head)
        conf = confusion_matrix(yb, np.argmax(logits, axis=1), model.head.n_classes)
        pairs = confused_pairs(conf, cfg.tau)

    if pairs:
        batch: list[Sample] = []
        for pair in pairs:
            batch.extend(sample_for_replay(buffer, policy, pair))
        X, y = stack(batch)
        lb, grads = replay_objective(model, X, y, pairs, cfg.pair_renormalize)
        loss = LossBreakdown(ce=0.0, ls=0.0, lp=0.0, lb=lb, total=lb, gamma=cfg.gamma)
    else:
        X, y = stack(sample_for_replay(buffer, policy))
        rep, logits = forward(X, model.adapter, model.head)
        ce, dlogits = cross_entropy(logits, y)
        grads = _backprop(model, X, rep, dlogits)
        loss = LossBreakdown(ce=ce, ls=0.0, lp=0.0, lb=0.0, total=ce, gamma=cfg.gamma)
    if not np.isfinite(loss.total):
        raise NonFiniteLossError(-1, loss.total)
    optimizer.step(model.parameters(), grads, skip)
    return pairs, loss


@dataclass
class RunConfig:
    stream: StreamConfig
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    buffer_size: int = 100
    replay_every: int = 100
    replay_batch_size: int = 10

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_size"] = self.stream.batch_size
        return d


@dataclass
class _TaskTracker:
    slot: int | None = None
    processed: dict[int, list[Sample]] = field(default_factory=dict)
    stats: list[dict] = field(default_factory=list)
    prev_params: np.ndarray | None = None


def _close_task(tracker: _TaskTracker, model: Model, cfg: TrainerConfig) -> None:
    t = tracker.slot
    seen = tracker.processed.get(t, [])
    params = model.flat()
    risk = None
    if seen:
        X, y = stack(seen)
        _, logits = forward(X, model.adapter, model.head)
        risk = float(np.mean(np.argmax(logits, axis=1) != y))
    kl = gaussian_kl(params, tracker.prev_params, cfg.kl_sigma)
    tracker.stats.append({"task_id": t, "m": len(seen), "empirical_risk": risk, "kl": kl})
    tracker.prev_params = params


def run(
    cfg: RunConfig,
    train_samples: Sequence[Sample],
    eval_samples: Sequence[Sample],
    checkpoint_path: str | Path | None = None,
) -> RunLog:
    """Train over the whole stream; returns the run log.

    Errors stop the run and yield a partial log with ``complete=False``.
    """
    tc = cfg.trainer
    runlog = RunLog(config=cfg.to_dict(), record_timing=tc.throughput_mode == "measured")
    stream = build_stream(cfg.stream, train_samples)
    d = train_samples[0].features.shape[0]
    C = cfg.stream.schedule.n_classes
    X_eval, y_eval = stack(list(eval_samples))

    model = Model.init(d, C, tc.adapter_hidden, tc.seed)
    ncm = NcmState(tc.ncm_momentum)
    optimizer = AdamW(tc.learning_rate, tc.betas, tc.eps, tc.weight_decay)
    buffer = MemoryBuffer(cfg.buffer_size, seed=tc.seed)
    policy = AccessPolicy(cfg.replay_every, cfg.replay_batch_size)
    gate = LiteGate(tc.lite_mode, tc.lite_threshold, tc.lite_latch)
    cursor = StreamCursor(stream, cfg.stream.batch_size)
    tracker = _TaskTracker(prev_params=model.flat())

    running_acc = 0.0
    iteration = 0
    samples_seen = 0
    seen_classes: set[int] = set()
    slot_times: dict[int, list[float]] = {}
    wall_clock: Fraction | None = None

    def record_eval() -> None:
        rec = evaluate(model.adapter, model.head, ncm, X_eval, y_eval, sorted(seen_classes), iteration, samples_seen)
        rec.stream_position = cursor.position
        if tc.throughput_mode == "measured":
            rec.v_m_measured = measure_throughput(runlog.batch_times, cfg.stream.batch_size)
        else:
            rec.v_m_measured = tc.model_throughput
        runlog.append(rec)

    try:
        while True:
            batch, _ = cursor.drain_batch(tc.model_throughput, wall_clock)
            if not batch:
                break
            slot = stream.slot_of(batch[-1].arrival_index)
            if slot != tracker.slot:
                if tracker.slot is not None:
                    _close_task(tracker, model, tc)
                tracker.slot = slot
                gate.reset()
                running_acc = 0.0
            for s in batch:
                tracker.processed.setdefault(stream.slot_of(s.arrival_index), []).append(s)

            X, y = stack(batch)
            buffer.update(batch)
            model.adapter.frozen = gate.fired
            before = model.adapter_checksum() if gate.fired else None

            iteration += 1
            step = train_step(model, X, y, ncm, tc, optimizer, iteration)
            elapsed = step.batch_time
            runlog.losses.append(step.loss)
            samples_seen += len(batch)
            seen_classes.update(y.tolist())

            if policy.may_access(iteration):
                t0 = time.perf_counter()
                replay_step(model, buffer, policy, tc, optimizer)
                elapsed += time.perf_counter() - t0
                runlog.replay_steps += 1
            if before is not None and model.adapter_checksum() != before:
                raise RuntimeError("frozen adapter parameters changed")

            running_acc = tc.acc_decay * running_acc + (1.0 - tc.acc_decay) * step.ncm_accuracy
            gate.update(running_acc)

            runlog.batch_times.append(elapsed)
            slot_times.setdefault(slot, []).append(elapsed)
            if tc.throughput_mode == "measured":
                wall_clock = cursor.start_time + Fraction(elapsed).limit_denominator(10**9)

            if iteration % tc.eval_interval == 0:
                record_eval()

        if tracker.slot is not None:
            _close_task(tracker, model, tc)
        if iteration and (not runlog.records or runlog.records[-1].iteration != iteration):
            record_eval()
        runlog.complete = True
    except Exception as exc:  # partial log, flagged incomplete
        log.error("run aborted: %s", exc)
        runlog.error = f"{type(exc).__name__}: {exc}"

    runlog.iterations = iteration
    runlog.task_stats = tracker.stats
    if tc.throughput_mode == "measured":
        v = [
            measure_throughput(slot_times[t], cfg.stream.batch_size) if slot_times.get(t) else None
            for t in range(stream.n_slots)
        ]
    else:
        v = [tc.model_throughput] * stream.n_slots
    runlog.throughput = cursor.records(v)
    if checkpoint_path is not None:
        runlog.checkpoint = Path(save_checkpoint(checkpoint_path, model.adapter, model.head, tc.seed)).name
    runlog.model = model
    runlog.ncm = ncm
    return runlog
