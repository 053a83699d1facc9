"""
Experiment harness
==================
Runs the configured variants for every seed, merges per-seed metrics,
aggregates across seeds and writes the report files:

    <out>/config.cfg            canonical config (its SHA-256 is the config hash)
    <out>/seed_<n>/metrics.csv  per-seed evaluation rows
    <out>/seed_<n>/<variant>/   theta_final.bin, periodic checkpoints, test_gradient.bin
    <out>/metrics.csv           all seeds, merged in seed order
    <out>/aggregate.csv         mean / std over seeds
    <out>/report.txt            summary table
    <out>/sweep.csv             noise sweep only
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd

from config import canonical_text, config_hash, load_experiment_config, output_root, with_overrides
from errors import ContractViolation, NumericalFailure
from feedback_service import FeedbackService, TestGradient
from maml_service import MAMLService, SeedStreams
from models import METRICS_COLUMNS, ExperimentConfig, GapReport, MetricsRecord, NoiseSpec, RunReport, SplitGap
from nn import ParameterSet, load_parameters
from storage import RunStore
from tasks import AugmentedTaskSource, ClassificationTaskSource, SinusoidTaskSource, Task, pool_statistics

logger = logging.getLogger(__name__)

GROUP_KEYS = ["variant", "phase", "outer_iter", "split", "adapt_steps"]
SWEEP_COLUMNS = ["std", "loss_mean", "loss_std", "accuracy_mean", "accuracy_std", "n_seeds"]

T = TypeVar("T")


def _population_std(values: pd.Series) -> float:
    values = values.dropna().to_numpy(dtype=float)
    return float(np.std(values)) if values.size else math.nan


def records_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    """
    MetricsRecords as a metrics.csv frame

    Raises:
        NumericalFailure: any reported value is non-finite
    """
    for record in records:
        for column in ("loss_mean", "loss_std", "accuracy_mean", "accuracy_std"):
            value = getattr(record, column)
            if value is not None and not math.isfinite(value):
                raise NumericalFailure(f"non-finite {column}", variant=record.variant, seed=record.seed,
                                       outer_iter=record.outer_iter, split=record.split)
    frame = pd.DataFrame([record.model_dump() for record in records], columns=METRICS_COLUMNS)
    for column in ("loss_mean", "loss_std", "accuracy_mean", "accuracy_std"):
        frame[column] = frame[column].astype(float)
    return frame


def aggregate(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and across-seed std (ddof 0) of the per-seed means, one row per evaluation point"""
    grouped = frame.groupby(GROUP_KEYS, sort=False)
    out = grouped.agg(
        loss_mean=("loss_mean", "mean"),
        loss_std=("loss_mean", _population_std),
        accuracy_mean=("accuracy_mean", "mean"),
        accuracy_std=("accuracy_mean", _population_std),
        n_seeds=("seed", "nunique"),
    ).reset_index()
    if not np.isfinite(out[["loss_mean", "loss_std"]].to_numpy()).all():
        raise NumericalFailure("non-finite aggregate loss")
    return out


def memorization_gap(
    maml: MAMLService,
    theta: ParameterSet,
    train_tasks: Sequence[Task],
    test_tasks: Sequence[Task],
    alpha: Optional[float] = None,
    steps: int = 10,
    ratio_threshold: float = 0.2,
    test_factor: float = 3.0,
    eps: float = 1e-12,
) -> GapReport:
    """
    Zero-shot vs adapted query loss on both splits

    The verdict fires when adaptation barely helps on meta-train tasks
    (gap ratio below ratio_threshold) while the adapted meta-test loss is
    more than test_factor times the adapted meta-train loss.
    """
    def split_gap(tasks: Sequence[Task]) -> SplitGap:
        losses, _ = maml.evaluate_losses(theta, tasks, alpha, [0, steps])
        zero_shot, adapted = float(losses[:, 0].mean()), float(losses[:, -1].mean())
        return SplitGap(zero_shot_loss=zero_shot, adapted_loss=adapted, gap_ratio=(zero_shot - adapted) / max(zero_shot, eps))

    train_gap = split_gap(train_tasks)
    test_gap = split_gap(test_tasks)
    verdict = train_gap.gap_ratio < ratio_threshold and test_gap.adapted_loss > test_factor * train_gap.adapted_loss
    return GapReport(
        adapt_steps=steps, meta_train=train_gap, meta_test=test_gap,
        ratio_threshold=ratio_threshold, test_factor=test_factor, memorization=verdict,
    )


class ExperimentService:
    """Config-driven experiment runner"""

    def __init__(self, config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None):
        """
        Initialize experiment service

        Args:
            config: Validated experiment config
            out_dir: Output directory (overrides config.output_dir and MAML_LAB_OUTPUT_ROOT)
        """
        self.config = config
        self.config_hash = config_hash(config)
        root = out_dir or config.output_dir or output_root() / f"{config.kind}_{self.config_hash[:12]}"
        self.store = RunStore(root)

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------
    def build_source(self, seed: int, variant: str = "vanilla"):
        if self.config.task_family == "classification":
            return ClassificationTaskSource(self.config.classification, seed)
        source = SinusoidTaskSource(self.config.sinusoid, seed)
        if variant == "meta_augmentation":
            return AugmentedTaskSource(source, self.config.meta_augmentation_offset)
        return source

    def noise_for(self, variant: str) -> NoiseSpec:
        noise = self.config.noise
        if variant == "noise":
            return noise
        if variant in ("noise_inner", "noise_outer", "noise_both"):
            return noise.model_copy(update={"target": variant.split("_", 1)[1]})
        return noise.model_copy(update={"target": "none"})

    def maml_for(self, seed: int, noise: Optional[NoiseSpec] = None) -> MAMLService:
        return MAMLService(self.config.model, self.config.train, noise, seed=seed, evaluation=self.config.evaluation)

    def target_task(self, seed: int) -> Task:
        """Meta-test task used as the feedback target of a seed"""
        streams = SeedStreams(seed)
        return self.build_source(seed).sample_test(
            streams.integer_seed(SeedStreams.FEEDBACK_TASK, self.config.feedback.test_task_seed)
        )

    def feedback_bases(self) -> List[str]:
        base = self.config.feedback.base
        return ["vanilla", "noise"] if base == "both" else [base]

    def _map_seeds(self, fn: Callable[[int], T], seeds: Sequence[int]) -> List[T]:
        """Run fn per seed (threaded when workers > 1), results in seed order"""
        if self.config.workers > 1 and len(seeds) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as executor:
                return list(executor.map(fn, seeds))
        return [fn(seed) for seed in seeds]

    # ------------------------------------------------------------------
    # Per-seed pipelines
    # ------------------------------------------------------------------
    def train_variant(self, variant: str, seed: int) -> Tuple[ParameterSet, List[MetricsRecord]]:
        maml = self.maml_for(seed, self.noise_for(variant))
        source = self.build_source(seed, variant)
        theta, records = maml.train(source, variant, checkpoint_dir=self.store.variant_dir(seed, variant))
        self.store.save_checkpoint(theta, seed, variant)
        return theta, records

    def run_feedback(
        self,
        seed: int,
        base: str,
        theta_star: ParameterSet,
        label: str = "feedback",
        test_grad: Optional[TestGradient] = None,
    ) -> Tuple[ParameterSet, List[MetricsRecord]]:
        """Feedback retraining of theta* on the seed's target task, then held-out evaluation"""
        feedback = self.config.feedback
        maml = self.maml_for(seed, self.noise_for(base) if feedback.use_noise else None)
        service = FeedbackService(maml, feedback)
        source = self.build_source(seed)
        theta_fb, records, test_grad = service.feedback_retrain(
            theta_star, self.target_task(seed), source,
            task_id=f"seed{seed}-task{feedback.test_task_seed}", test_grad=test_grad, variant=label,
        )
        self.store.save_checkpoint(theta_fb, seed, label)
        test_grad.save(self.store.variant_dir(seed, label) / "test_gradient.bin")
        records += maml.evaluate_splits(theta_fb, maml.heldout_tasks(source), feedback.iterations, label, phase="feedback")
        return theta_fb, records

    def run_seed(self, seed: int) -> List[MetricsRecord]:
        variants = self.config.resolved_variants
        records: List[MetricsRecord] = []
        thetas: Dict[str, ParameterSet] = {}

        for variant in variants:
            if variant != "feedback":
                thetas[variant], variant_records = self.train_variant(variant, seed)
                records += variant_records

        if "feedback" in variants:
            bases = self.feedback_bases()
            for base in bases:
                if base not in thetas:
                    thetas[base], base_records = self.train_variant(base, seed)
                    records += base_records
                label = "feedback" if len(bases) == 1 else f"feedback_{base}"
                _, feedback_records = self.run_feedback(seed, base, thetas[base], label)
                records += feedback_records

        self.store.write_csv(records_frame(records), "metrics.csv", seed=seed)
        return records

    # ------------------------------------------------------------------
    # Operations
    # ------------------------------------------------------------------
    def run(self) -> RunReport:
        """Execute every seed of the configured experiment and write the run files"""
        started = time.perf_counter()
        logger.info(f"🚀 Running {self.config.kind} experiment, seeds {self.config.seeds} -> {self.store.root}")
        self.store.write_text("config.cfg", canonical_text(self.config))

        if self.config.kind == "noise_sweep":
            report, _ = self._sweep(self.config.sweep.stds, started)
            return report

        if self.config.task_family == "classification":
            # pool is a pure function of the seed; record the first one for inspection
            self.store.write_csv(pool_statistics(self.build_source(self.config.seeds[0]).pool), "pool_statistics.csv")

        per_seed = self._map_seeds(self.run_seed, self.config.seeds)
        records = [record for seed_records in per_seed for record in seed_records]
        return self._finish(records, started)

    def noise_sweep(self, stds: Optional[Sequence[float]] = None) -> pd.DataFrame:
        """
        Inner-loop noise sweep

        Args:
            stds: Sigma grid (defaults to the sweep config); any order, reported descending

        Returns:
            sweep.csv frame, one row per sigma
        """
        self.store.write_text("config.cfg", canonical_text(self.config))
        _, sweep = self._sweep(stds if stds is not None else self.config.sweep.stds, time.perf_counter())
        return sweep

    def _sweep(self, stds: Sequence[float], started: float) -> Tuple[RunReport, pd.DataFrame]:
        if not stds:
            raise ContractViolation("noise sweep needs at least one sigma")
        if any(std < 0 for std in stds):
            raise ContractViolation("sigma values must be non-negative")
        stds = sorted(stds, reverse=True)
        seeds = self.config.seeds
        inner_noise = self.config.noise.model_copy(update={"target": "inner"})

        def one_seed(seed: int) -> List[MetricsRecord]:
            records: List[MetricsRecord] = []
            for std in stds:
                maml = self.maml_for(seed, inner_noise.model_copy(update={"std": std}))
                _, std_records = maml.train(self.build_source(seed), f"noise_inner_std={std:g}")
                records += std_records
            self.store.write_csv(records_frame(records), "metrics.csv", seed=seed)
            return records

        per_seed = self._map_seeds(one_seed, seeds)
        records = [record for seed_records in per_seed for record in seed_records]

        final_iter = self.config.train.outer_iterations
        report_steps = self.config.evaluation.report_steps
        rows = []
        for std in stds:
            label = f"noise_inner_std={std:g}"
            finals = [
                r for r in records
                if r.variant == label and r.split == "meta_test" and r.outer_iter == final_iter and r.adapt_steps == report_steps
            ]
            losses = pd.Series([r.loss_mean for r in finals], dtype=float)
            accuracies = pd.Series([r.accuracy_mean for r in finals], dtype=float)
            rows.append({
                "std": std,
                "loss_mean": float(losses.mean()),
                "loss_std": _population_std(losses),
                "accuracy_mean": float(accuracies.mean()) if accuracies.notna().any() else math.nan,
                "accuracy_std": _population_std(accuracies),
                "n_seeds": len(finals),
            })
        sweep = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
        self.store.write_csv(sweep, "sweep.csv")
        logger.info(f"✅ Noise sweep over {len(stds)} sigma values written to {self.store.path('sweep.csv')}")
        return self._finish(records, started), sweep

    def _finish(self, records: List[MetricsRecord], started: float) -> RunReport:
        frame = records_frame(records)
        summary = aggregate(frame)
        self.store.write_csv(frame, "metrics.csv")
        self.store.write_csv(summary, "aggregate.csv")

        wall_clock = time.perf_counter() - started
        self.store.write_text("report.txt", render_report(self.config, self.config_hash, wall_clock, summary))
        logger.info(f"✅ {len(records)} metric rows over {len(self.config.seeds)} seeds in {wall_clock:.1f}s")
        return RunReport(
            config_hash=self.config_hash,
            wall_clock_seconds=wall_clock,
            output_dir=str(self.store.root),
            records=records,
            aggregate=summary.to_dict(orient="records"),
        )

    # ------------------------------------------------------------------
    # Checkpoint-based commands
    # ------------------------------------------------------------------
    def evaluate_checkpoint(self, checkpoint: Union[str, Path], seed: int) -> pd.DataFrame:
        """Evaluate stored parameters on the seed's held-out tasks; writes evaluate.csv"""
        theta = load_parameters(checkpoint)
        maml = self.maml_for(seed)
        heldout = maml.heldout_tasks(self.build_source(seed))
        records = maml.evaluate_splits(theta, heldout, 0, Path(checkpoint).stem, phase="evaluate")
        frame = records_frame(records)
        self.store.write_csv(frame, "evaluate.csv")
        return frame

    def diagnose(self, checkpoint: Union[str, Path], seed: int) -> GapReport:
        """Memorization diagnostic of stored parameters; writes gap.json"""
        theta = load_parameters(checkpoint)
        maml = self.maml_for(seed)
        train_tasks, test_tasks = maml.heldout_tasks(self.build_source(seed))
        evaluation = self.config.evaluation
        report = memorization_gap(
            maml, theta, train_tasks, test_tasks,
            steps=evaluation.report_steps,
            ratio_threshold=evaluation.gap_ratio_threshold,
            test_factor=evaluation.gap_test_factor,
        )
        self.store.write_text("gap.json", report.model_dump_json(indent=2) + "\n")
        verdict = "⚠️ memorization" if report.memorization else "✅ no memorization"
        logger.info(f"{verdict} (train gap ratio {report.meta_train.gap_ratio:.3f}, "
                    f"adapted loss test/train {report.meta_test.adapted_loss:.4f}/{report.meta_train.adapted_loss:.4f})")
        return report

    def feedback_from_checkpoint(
        self,
        checkpoint: Union[str, Path],
        seed: int,
        test_gradient: Optional[Union[str, Path]] = None,
    ) -> RunReport:
        """Feedback retraining starting from stored parameters (and optionally a stored test gradient)"""
        started = time.perf_counter()
        self.store.write_text("config.cfg", canonical_text(self.config))
        theta_star = load_parameters(checkpoint)
        test_grad = TestGradient.load(test_gradient) if test_gradient else None
        _, records = self.run_feedback(seed, self.feedback_bases()[0], theta_star, "feedback", test_grad)
        self.store.write_csv(records_frame(records), "metrics.csv", seed=seed)
        return self._finish(records, started)


def render_report(config: ExperimentConfig, digest: str, wall_clock: float, summary: pd.DataFrame) -> str:
    """Summary table: final meta-test (and target-task) results at the reporting step count"""
    report_steps = config.evaluation.report_steps
    classification = config.task_family == "classification"
    lines = [
        f"Experiment: {config.kind} ({config.task_family})",
        f"Config hash: {digest}",
        f"Seeds: {','.join(str(s) for s in config.seeds)}",
        f"Wall clock: {wall_clock:.1f} s",
        "",
        f"Results after {report_steps} adaptation steps (mean +- std over seeds)",
        f"{'variant':<28} {'phase':<9} {'split':<12} {'iter':>6} {'loss':>22}" + (f" {'accuracy':>20}" if classification else ""),
    ]

    rows = summary[summary["adapt_steps"] == report_steps]
    for (variant, phase, split), group in rows.groupby(["variant", "phase", "split"], sort=False):
        if split == "meta_train":
            continue
        picks = [group["outer_iter"].idxmax()]
        if split == "target_task" and group["outer_iter"].nunique() > 1:
            picks.insert(0, group["outer_iter"].idxmin())
        for index in picks:
            row = summary.loc[index]
            line = (f"{variant:<28} {phase:<9} {split:<12} {int(row['outer_iter']):>6} "
                    f"{row['loss_mean']:>11.5f} +- {row['loss_std']:<7.5f}")
            if classification:
                line += f" {100 * row['accuracy_mean']:>9.2f}% +- {100 * row['accuracy_std']:.2f}"
            lines.append(line)
    return "\n".join(lines) + "\n"


def run_experiment(
    config_path: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, str]] = None,
) -> RunReport:
    """Load a config file and run it end to end"""
    config = load_experiment_config(config_path, overrides)
    return ExperimentService(config, out_dir).run()


def noise_sweep(
    config_path: Union[str, Path],
    stds: Optional[Sequence[float]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> pd.DataFrame:
    """Sigma sweep of the inner-loop noise over a base config"""
    config = load_experiment_config(config_path)
    if config.kind != "noise_sweep":
        config = with_overrides(config, kind="noise_sweep", sweep__task=config.task_family)
    return ExperimentService(config, out_dir).noise_sweep(stds)
