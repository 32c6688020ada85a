import csv
import json
import math

import numpy as np
import pytest

from nsce.cli import _frequency, build_parser, main, spec_from_args
from nsce.experiment import ExperimentSpec, SyntheticSpec, generate_synthetic, run_experiment, synthesize
from nsce.metrics import read_jsonl
from nsce.stream import load_dataset

SMALL = {
    "stream": {"tasks": [[0, 1], [2, 3]], "counts": [200, 200]},
    "trainer": {"eval_interval": 5},
    "policy": {"replay_every": 4},
    "synthetic": {"n_classes": 4, "dim": 8, "n_per_class": 150, "pairs": [[0, 2]]},
}


def _spec(tmp_path, **kw):
    raw = json.loads(json.dumps(SMALL))
    raw["out"] = str(tmp_path / "out")
    raw.update(kw)
    return ExperimentSpec.from_dict(raw)


def _summary(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- synthetic generator ----------------------------------------------------------------


def test_well_separated_pair_is_learned_in_one_pass(tmp_path):
    spec = ExperimentSpec.from_dict(
        {
            "stream": {"tasks": [[0, 1]], "counts": [1600]},
            "trainer": {"learning_rate": 0.01},
            "synthetic": {"n_classes": 2, "dim": 8, "separation": 10.0, "pairs": [], "n_per_class": 1000},
            "out": str(tmp_path / "out"),
        }
    )
    assert run_experiment(spec) == 0
    assert float(_summary(tmp_path / "out" / "summary.csv")[0]["last_accuracy_mean"]) >= 0.99


def test_confusable_pair_bayes_accuracy():
    syn = SyntheticSpec(n_classes=2, dim=8, pairs=[(0, 1)], pair_separation=0.5, n_per_class=40000)
    mu = syn.means()
    assert abs(np.linalg.norm(mu[1] - mu[0]) - 0.5) <= 1e-12
    X, y = synthesize(syn, seed=0)
    # optimal rule for equal isotropic Gaussians: nearer true mean
    pred = (np.linalg.norm(X - mu[1], axis=1) < np.linalg.norm(X - mu[0], axis=1)).astype(int)
    bayes = 0.5 * (1 + math.erf(0.25 / math.sqrt(2)))
    assert abs(bayes - 0.5987) < 1e-4
    assert abs(np.mean(pred == y) - bayes) <= 0.01


def test_class_means_are_separated_as_configured():
    syn = SyntheticSpec(n_classes=4, dim=8, separation=6.0, sigma=0.5, pairs=[])
    mu = syn.means()
    for a in range(4):
        for b in range(a):
            assert abs(np.linalg.norm(mu[a] - mu[b]) - 3.0) <= 1e-12


@pytest.mark.parametrize("kw", [{"n_per_class": 0}, {"separation": 0.0}, {"sigma": -1.0}, {"pairs": [(0, 0)]}])
def test_generator_rejects_bad_spec(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_generated_files_load(tmp_path):
    syn = SyntheticSpec(n_classes=3, dim=6, pairs=[], n_per_class=20)
    samples, d, C = load_dataset(generate_synthetic(syn, tmp_path, seed=3))
    assert (len(samples), d, C) == (60, 6, 3)
    X, _ = synthesize(syn, seed=3)
    np.testing.assert_array_equal(np.stack([s.features for s in samples]), X.astype(np.float32))


# -- experiment runner -------------------------------------------------------------------------


def test_single_seed_gives_one_log_and_row(tmp_path):
    spec = _spec(tmp_path)
    assert run_experiment(spec) == 0
    out = tmp_path / "out"
    assert sorted(p.relative_to(out).as_posix() for p in out.glob("*/*/run.jsonl")) == ["base/0/run.jsonl"]
    rows = _summary(out / "summary.csv")
    assert len(rows) == 1 and rows[0]["n_seeds"] == "1" and rows[0]["n_complete"] == "1"
    report = json.loads((out / "pacbayes.json").read_text())
    assert "Gaussian" in report["runs"][0]["posterior"] and "configured" in report["runs"][0]


@pytest.mark.slow
def test_sweep_cardinality(tmp_path):
    spec = _spec(tmp_path, seeds=[0, 1, 2, 3, 4], sweep={"trainer.gamma": [0.0, 0.01, 0.1]})
    assert run_experiment(spec) == 0
    out = tmp_path / "out"
    assert len(list(out.glob("*/*/run.jsonl"))) == 15
    rows = _summary(out / "summary.csv")
    assert [r["trainer.gamma"] for r in rows] == ["0.0", "0.01", "0.1"]
    assert all(r["n_seeds"] == "5" for r in rows)


def test_rerun_is_byte_identical(tmp_path):
    a = _spec(tmp_path / "a", seeds=[0, 1])
    b = _spec(tmp_path / "b", seeds=[0, 1])
    assert run_experiment(a) == run_experiment(b) == 0
    for rel in ("summary.csv", "pacbayes.json", "base/0/run.jsonl", "base/1/run.jsonl"):
        assert (tmp_path / "a/out" / rel).read_bytes() == (tmp_path / "b/out" / rel).read_bytes()


def test_summary_recomputable_from_logs(tmp_path):
    spec = _spec(tmp_path, seeds=[0, 1, 2])
    run_experiment(spec)
    out = tmp_path / "out"
    aucs, mean_s = [], []
    for seed in (0, 1, 2):
        _, records, _ = read_jsonl(out / "base" / str(seed) / "run.jsonl")
        area, prev = 0.0, 0
        for r in records:
            area += r.accuracy_softmax * (r.samples_seen - prev)
            prev = r.samples_seen
        aucs.append(area / prev)
        mean_s.append(sum(records[-1].per_class_s) / len(records[-1].per_class_s))
    row = _summary(out / "summary.csv")[0]
    assert abs(float(row["a_auc_mean"]) - sum(aucs) / 3) <= 1e-12
    assert abs(float(row["a_auc_std"]) - float(np.std(aucs))) <= 1e-12
    assert abs(float(row["mean_s_mean"]) - sum(mean_s) / 3) <= 1e-12


def test_failed_run_gives_nonzero_status(tmp_path):
    spec = _spec(tmp_path, stream={"tasks": [[0, 1], [2, 3]], "counts": [5000, 200]})
    assert run_experiment(spec) == 1
    _, _, summary = read_jsonl(tmp_path / "out" / "base" / "0" / "run.jsonl")
    assert summary["complete"] is False and "DatasetError" in summary["error"]
    assert _summary(tmp_path / "out" / "summary.csv")[0]["n_complete"] == "0"


@pytest.mark.parametrize(
    "raw",
    [
        {"seeds": []},
        {"sweep": {"trainer.nonexistent": [1]}},
        {"trainer": {"bogus": 1}},
        {"stream": {"counts": [10], "durations": [1.0]}},
        {"trainer": {"tau": 1.5}},
        {"stream": {"tasks": [[0], [0]], "counts": [10, 10]}},
    ],
)
def test_invalid_specs_rejected(raw):
    with pytest.raises((ValueError, TypeError)):
        ExperimentSpec.from_dict(raw)


# -- command line ------------------------------------------------------------------------------


def test_frequency_parsing():
    assert _frequency("1/100") == 100 and _frequency("0.1") == 10 and _frequency("1") == 1
    for bad in ("0", "2", "0.3"):
        with pytest.raises(Exception):
            _frequency(bad)


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({**SMALL, "trainer": {"gamma": 0.5, "tau": 0.3}}))
    args = build_parser().parse_args(
        ["--config", str(cfg), "--gamma", "0.02", "--replay-freq", "1/50", "--lite", "--seeds", "3", "4",
         "--flow-rate", "50", "--set", "stream.batch_size=5", "--set", "synthetic.sigma=0.5"]
    )
    spec = spec_from_args(args)
    assert spec.trainer["gamma"] == 0.02 and spec.trainer["tau"] == 0.3 and spec.trainer["lite_mode"] is True
    assert spec.policy["replay_every"] == 50 and spec.seeds == [3, 4]
    assert spec.stream["flow_rate"] == 50 and spec.stream["batch_size"] == 5
    assert spec.synthetic.sigma == 0.5


def test_cli_run_and_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out), "--seed", "1", "--model-throughput", "50"]) == 0
    row = _summary(out / "summary.csv")[0]
    assert float(row["skipped_mean"]) == 200.0 and float(row["v_m_mean"]) == 50.0
    assert main(["--config", str(tmp_path / "missing.json")]) == 2
    assert main(["--out", str(out), "--set", "trainer.tau=3"]) == 2
    assert main(["--out", str(out), "--set", 'sweep={"trainer.gamma": [0.1, -1]}']) == 2
    assert "error" in capsys.readouterr().err


def test_cli_generate_synthetic(tmp_path, capsys):
    assert main(["--set", 'synthetic={"n_classes": 2, "dim": 4, "n_per_class": 5, "pairs": []}', "--generate-synthetic", str(tmp_path)]) == 0
    manifest = capsys.readouterr().out.strip()
    samples, d, C = load_dataset(manifest)
    assert (len(samples), d, C) == (10, 4, 2)
