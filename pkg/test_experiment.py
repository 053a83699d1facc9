"""Test the experiment harness end to end on tiny runs"""
import json
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / "src"))

import numpy as np
import pandas as pd
import pytest

from config import config_hash, load_experiment_config
from experiment_service import aggregate, memorization_gap, noise_sweep, records_frame, run_experiment
from errors import NumericalFailure
from main import EXIT_CONFIG, EXIT_OK, main
from maml_service import MAMLService
from models import MetricsRecord, ModelSpec, NoiseSpec, SinusoidConfig, TrainConfig
from nn import init_params
from tasks import SinusoidTaskSource

from check_acceptance import calibrate_inner_sigma

TINY_SINUSOID = """
kind=sinusoid
variants=vanilla,meta_augmentation,noise,feedback
seeds=0,1
model.hidden_sizes=8
train.outer_iterations=4
train.meta_batch_size=2
train.log_interval=2
evaluation.interval=2
evaluation.n_tasks=3
evaluation.adapt_steps=0,1,2
evaluation.report_steps=2
feedback.iterations=2
noise.std=1e-3
noise.outer_std=1e-4
"""

TINY_CLASSIFICATION = """
kind=classification
variants=vanilla,noise_inner
seeds=0
model.input_dim=6
model.hidden_sizes=8
model.output_dim=5
model.head=classification
classification.k_way=5
classification.k_shot=1
classification.q_query=2
classification.feature_dim=6
classification.samples_per_class=5
classification.n_train_classes=10
classification.n_test_classes=10
train.inner_lr=0.1
train.outer_iterations=2
train.meta_batch_size=2
evaluation.interval=2
evaluation.n_tasks=2
evaluation.adapt_steps=0,1
evaluation.report_steps=1
noise.std=1e-2
"""


def _write(directory: Path, text: str, name: str = "experiment.cfg") -> Path:
    path = directory / name
    path.write_text(text, encoding="utf-8")
    return path


def test_sinusoid_comparison_run():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        report = run_experiment(_write(tmp, TINY_SINUSOID), out_dir=tmp / "run")
        out = Path(report.output_dir)

        metrics = pd.read_csv(out / "metrics.csv")
        summary = pd.read_csv(out / "aggregate.csv")
        report_text = (out / "report.txt").read_text(encoding="utf-8")

        assert (out / "seed_0" / "metrics.csv").is_file() and (out / "seed_1" / "metrics.csv").is_file()
        assert (out / "seed_0" / "vanilla" / "theta_final.bin").is_file()
        assert (out / "seed_1" / "feedback" / "test_gradient.bin").is_file()
        assert config_hash(load_experiment_config(out / "config.cfg")) == report.config_hash
        assert f"Config hash: {report.config_hash}" in report_text

    assert list(metrics["seed"].unique()) == [0, 1]
    assert list(summary["variant"].unique()) == ["vanilla", "meta_augmentation", "noise", "feedback"]
    assert len(metrics) == 2 * (3 * 18 + 12)
    assert set(summary["n_seeds"]) == {2}
    assert metrics["accuracy_mean"].isna().all()

    target = metrics[metrics["split"] == "target_task"]
    assert set(target["variant"]) == {"feedback"} and sorted(target["outer_iter"].unique()) == [0, 2]

    keys = ["variant", "phase", "outer_iter", "split", "adapt_steps"]
    recomputed = metrics.groupby(keys, sort=False)["loss_mean"].mean().reset_index()
    merged = summary.merge(recomputed, on=keys, suffixes=("", "_recomputed"))
    assert len(merged) == len(summary)
    assert np.max(np.abs(merged["loss_mean"] - merged["loss_mean_recomputed"])) <= 1e-12


def test_feedback_from_both_bases_is_labelled_per_base():
    text = TINY_SINUSOID.replace("seeds=0,1", "seeds=0")
    text = text.replace("variants=vanilla,meta_augmentation,noise,feedback", "variants=feedback\nfeedback.base=both")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        report = run_experiment(_write(tmp, text), out_dir=tmp / "run")
        out = Path(report.output_dir)
        assert (out / "seed_0" / "feedback_noise" / "test_gradient.bin").is_file()
        assert (out / "seed_0" / "noise" / "theta_final.bin").is_file()

    variants = [r.variant for r in report.records]
    assert list(dict.fromkeys(variants)) == ["vanilla", "feedback_vanilla", "noise", "feedback_noise"]
    assert len(report.records) == 2 * 18 + 2 * 12


def test_reruns_are_byte_identical():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = _write(tmp, TINY_SINUSOID.replace("variants=vanilla,meta_augmentation,noise,feedback", "variants=noise"))
        first = run_experiment(config, out_dir=tmp / "a")
        second = run_experiment(config, out_dir=tmp / "b", overrides={"workers": "2"})
        assert (Path(first.output_dir) / "metrics.csv").read_bytes() == (Path(second.output_dir) / "metrics.csv").read_bytes()


def test_zero_iterations_aggregate_equals_single_evaluation():
    text = TINY_SINUSOID.replace("seeds=0,1", "seeds=1").replace("train.outer_iterations=4", "train.outer_iterations=0")
    text = text.replace("variants=vanilla,meta_augmentation,noise,feedback", "variants=vanilla")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        report = run_experiment(_write(tmp, text), out_dir=tmp / "run")

    rows = pd.DataFrame(report.aggregate)
    assert len(rows) == len(report.records) == 6
    assert set(rows["outer_iter"]) == {0}
    assert np.array_equal(rows["loss_mean"].to_numpy(), np.array([r.loss_mean for r in report.records]))
    assert (rows["loss_std"] == 0.0).all()


def test_classification_run_reports_accuracy():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        report = run_experiment(_write(tmp, TINY_CLASSIFICATION), out_dir=tmp / "run")
        stats = pd.read_csv(Path(report.output_dir) / "pool_statistics.csv")
        report_text = (Path(report.output_dir) / "report.txt").read_text(encoding="utf-8")

    assert len(stats) == 20
    accuracies = [r.accuracy_mean for r in report.records]
    assert all(a is not None and 0.0 <= a <= 1.0 for a in accuracies)
    assert {r.variant for r in report.records} == {"vanilla", "noise_inner"}
    assert "%" in report_text


def test_noise_sweep_rows():
    text = TINY_SINUSOID.replace("kind=sinusoid", "kind=noise_sweep\nsweep.task=sinusoid\nsweep.stds=0,1e-2,1e-1")
    text = text.replace("variants=vanilla,meta_augmentation,noise,feedback", "")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        sweep = noise_sweep(_write(tmp, text), out_dir=tmp / "run")
        written = pd.read_csv(tmp / "run" / "sweep.csv")
        assert (tmp / "run" / "aggregate.csv").is_file()

    assert sweep["std"].tolist() == [0.1, 0.01, 0.0]
    assert written["std"].tolist() == [0.1, 0.01, 0.0]
    assert (sweep["n_seeds"] == 2).all()
    assert np.isfinite(sweep["loss_mean"]).all()


def test_sigma_calibration_uses_its_own_seeds():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        config = load_experiment_config(_write(tmp, TINY_SINUSOID + "sweep.stds=1e-2,1e-3\n"))
        sigma = calibrate_inner_sigma(config, tmp / "calibration", n_seeds=1)
        seed_dirs = sorted(p.name for p in (tmp / "calibration").glob("seed_*"))
        sweep = pd.read_csv(tmp / "calibration" / "sweep.csv")

    assert sigma in (1e-2, 1e-3)
    assert sigma == sweep.loc[sweep["loss_mean"].idxmin(), "std"]
    assert seed_dirs == ["seed_100"]
    assert calibrate_inner_sigma(config, Path("unused"), n_seeds=0) == config.noise.std


def test_shipped_sinusoid_config_compares_inner_noise():
    config = load_experiment_config(Path(__file__).resolve().parent / "configs" / "sinusoid.cfg")
    assert "noise_inner" in config.resolved_variants
    assert config.noise.applies_to("inner")
    # sigma must be comparable to one inner step on weights initialised at std 0.01
    assert config.noise.std >= 1e-3
    assert config.train.outer_lr > TrainConfig().outer_lr


def test_sigma_zero_sweep_row_matches_vanilla():
    text = TINY_SINUSOID.replace("kind=sinusoid", "kind=noise_sweep\nsweep.task=sinusoid\nsweep.stds=0")
    text = text.replace("variants=vanilla,meta_augmentation,noise,feedback", "")
    vanilla_text = TINY_SINUSOID.replace("variants=vanilla,meta_augmentation,noise,feedback", "variants=vanilla")
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        sweep = noise_sweep(_write(tmp, text), out_dir=tmp / "sweep")
        vanilla = run_experiment(_write(tmp, vanilla_text, "vanilla.cfg"), out_dir=tmp / "vanilla")

    final = [r.loss_mean for r in vanilla.records
             if r.split == "meta_test" and r.outer_iter == 4 and r.adapt_steps == 2]
    assert sweep["loss_mean"].iloc[0] == pytest.approx(np.mean(final), abs=1e-12)


def test_memorization_gap_is_symmetric_for_identical_splits():
    maml = MAMLService(ModelSpec(hidden_sizes=[8]), TrainConfig(), NoiseSpec(target="none"), seed=0)
    source = SinusoidTaskSource(SinusoidConfig(), seed=0)
    tasks = [source.sample_test(i) for i in range(5)]
    report = memorization_gap(maml, maml.init_params(), tasks, tasks, steps=5)
    assert not report.memorization
    assert report.meta_train == report.meta_test


def test_memorization_verdict_fires_when_train_tasks_are_already_fit():
    spec = ModelSpec(hidden_sizes=[8])
    maml = MAMLService(spec, TrainConfig(), NoiseSpec(target="none"), seed=0)
    source = SinusoidTaskSource(SinusoidConfig(), seed=0)
    theta = init_params(spec, 0).map(lambda t: t * 0.0)
    fitted = [replace(source.sample_train(i), support_y=np.zeros(5), query_y=np.zeros(10)) for i in range(5)]
    unseen = [source.sample_test(i) for i in range(5)]

    report = memorization_gap(maml, theta, fitted, unseen, steps=3)
    assert report.meta_train.zero_shot_loss == 0.0
    assert report.meta_train.gap_ratio == 0.0
    assert report.memorization


def test_non_finite_metrics_fail_the_run():
    record = MetricsRecord(outer_iter=0, split="meta_test", adapt_steps=0, loss_mean=float("nan"), loss_std=0.0)
    with pytest.raises(NumericalFailure):
        records_frame([record])


def test_aggregate_uses_population_std():
    records = [
        MetricsRecord(outer_iter=0, split="meta_test", adapt_steps=0, loss_mean=value, loss_std=0.0, seed=seed)
        for seed, value in enumerate([1.0, 3.0])
    ]
    row = aggregate(records_frame(records)).iloc[0]
    assert row["loss_mean"] == 2.0
    assert row["loss_std"] == 1.0
    assert row["n_seeds"] == 2


def test_cli_exit_codes_and_checkpoint_commands():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        bad = _write(tmp, "train.inner_lr=-3\n", "bad.cfg")
        assert main(["train", "--config", str(bad), "--out", str(tmp / "bad")]) == EXIT_CONFIG

        text = TINY_SINUSOID.replace("variants=vanilla,meta_augmentation,noise,feedback", "variants=vanilla")
        config = _write(tmp, text)
        assert main(["train", "--config", str(config), "--seed", "3", "--out", str(tmp / "run")]) == EXIT_OK
        checkpoint = tmp / "run" / "seed_3" / "vanilla" / "theta_final.bin"
        assert checkpoint.is_file()

        assert main(["diagnose", "--config", str(config), "--seed", "3",
                     "--checkpoint", str(checkpoint), "--out", str(tmp / "diag")]) == EXIT_OK
        gap = json.loads((tmp / "diag" / "gap.json").read_text(encoding="utf-8"))
        assert set(gap) >= {"meta_train", "meta_test", "memorization"}

        assert main(["evaluate", "--config", str(config), "--seed", "3",
                     "--checkpoint", str(checkpoint), "--out", str(tmp / "eval")]) == EXIT_OK
        assert len(pd.read_csv(tmp / "eval" / "evaluate.csv")) == 6

        assert main(["feedback", "--config", str(config), "--seed", "3",
                     "--checkpoint", str(checkpoint), "--out", str(tmp / "fb")]) == EXIT_OK
        stored = tmp / "fb" / "seed_3" / "feedback" / "test_gradient.bin"
        assert stored.is_file()
        assert main(["feedback", "--config", str(config), "--seed", "3", "--checkpoint", str(checkpoint),
                     "--test-gradient", str(stored), "--out", str(tmp / "fb2")]) == EXIT_OK
        assert (tmp / "fb" / "metrics.csv").read_bytes() == (tmp / "fb2" / "metrics.csv").read_bytes()


if __name__ == "__main__":
    failures = 0
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"✅ {name}")
            except Exception as e:
                failures += 1
                print(f"❌ {name}: {e}")
    sys.exit(1 if failures else 0)
