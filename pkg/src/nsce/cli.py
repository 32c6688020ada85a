"""Command-line entry point.

Settings come from an optional JSON experiment file; flags override it.
Any config field can be set with ``--set section.key=value`` where the
value is parsed as JSON (bare words fall back to strings).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

from .experiment import ExperimentSpec, SyntheticSpec, generate_synthetic, run_experiment


def _frequency(text: str) -> int:
    """Replay period from a frequency such as ``1/100`` or ``0.01``."""
    f = Fraction(text).limit_denominator(10**6)
    if f <= 0 or f > 1:
        raise argparse.ArgumentTypeError("replay frequency must lie in (0, 1]")
    period = 1 / f
    if period.denominator != 1:
        raise argparse.ArgumentTypeError("replay frequency must be 1/k for an integer k")
    return int(period)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsce", description="Throughput-aware online continual learning runs.")
    p.add_argument("--config", type=Path, help="JSON experiment file")
    p.add_argument("--out", help="output directory")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="single run seed")
    seeds.add_argument("--seeds", type=int, nargs="+", help="list of run seeds")
    p.add_argument("--dataset", help="dataset manifest (JSON) or CSV file")
    p.add_argument("--flow-rate", type=float, help="stream flow rate v_s, samples per second")
    p.add_argument("--model-throughput", type=float, help="simulated model throughput v_m, samples per second")
    p.add_argument("--gamma", type=float, help="weight of the sparsity and separation terms")
    p.add_argument("--tau", type=float, help="confusion threshold for targeted replay")
    p.add_argument("--replay-freq", type=_frequency, metavar="FREQ", help="buffer accesses per iteration, e.g. 1/100")
    p.add_argument("--buffer-size", type=int, help="memory buffer capacity")
    p.add_argument("--lite", action="store_true", default=None, help="freeze the adapter once the task is learned")
    p.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config field"
    )
    p.add_argument(
        "--generate-synthetic",
        type=Path,
        metavar="DIR",
        help="only write the configured synthetic dataset to DIR and exit",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    raw: dict = json.loads(args.config.read_text()) if args.config else {}
    for section in ("stream", "trainer", "policy"):
        raw[section] = dict(raw.get(section, {}))
    overrides = {
        ("stream", "flow_rate"): args.flow_rate,
        ("trainer", "model_throughput"): args.model_throughput,
        ("trainer", "gamma"): args.gamma,
        ("trainer", "tau"): args.tau,
        ("trainer", "lite_mode"): args.lite,
        ("policy", "replay_every"): args.replay_freq,
        ("policy", "buffer_size"): args.buffer_size,
    }
    for (section, key), value in overrides.items():
        if value is not None:
            raw[section][key] = value
    for item in args.set:
        path, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        section, _, key = path.partition(".")
        if not key:
            raw[section] = _parse_value(value)
        else:
            raw.setdefault(section, {})[key] = _parse_value(value)
    if args.out:
        raw["out"] = args.out
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    elif args.seeds:
        raw["seeds"] = args.seeds
    if args.dataset:
        raw["dataset"] = args.dataset
        raw.pop("synthetic", None)
    return ExperimentSpec.from_dict(raw)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = spec_from_args(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.generate_synthetic is not None:
        syn = spec.synthetic or SyntheticSpec()
        manifest = generate_synthetic(syn, args.generate_synthetic, seed=spec.seeds[0])
        print(manifest)
        return 0
    status = run_experiment(spec)
    print(Path(spec.out) / "summary.csv")
    return status


if __name__ == "__main__":
    sys.exit(main())
