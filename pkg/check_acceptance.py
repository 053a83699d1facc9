"""
Desk-scale acceptance run (long: tens of minutes)

    python check_acceptance.py [--out runs/acceptance] [--seeds 10] [--sweep-repeats 10]
                               [--only sinusoid,classification,sweep] [--calibration-seeds 2]
                               [--record docs/ACCEPTANCE.md]

Checks the direction of the published results at laptop scale:
  - NME sinusoids: inner-noise adapted meta-test MSE <= 0.5x vanilla, vanilla meta-test >= 3x its meta-train MSE
  - memorization verdict fires for vanilla and not for the inner-noise variant in >= 80% of seeds
  - feedback retraining lowers the target task's adapted MSE (median over seeds)
  - NME classification: vanilla near chance, inner noise >= 15 points above vanilla (medians)
  - noise sweep: best sigma is an interior grid point in >= 70% of repeated sweeps

Before the sinusoid and classification checks the inner sigma is picked from the sweep grid on
calibration seeds (100, 101, ...) that the checks never evaluate on.
"""
import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / "src"))

import numpy as np
import pandas as pd

from config import config_hash, load_experiment_config, with_overrides
from experiment_service import ExperimentService
from models import ExperimentConfig

REPO = Path(__file__).resolve().parent
CALIBRATION_SEED_BASE = 100

logger = logging.getLogger("acceptance")


def _final(frame: pd.DataFrame, variant: str, split: str, steps: int, phase: str = "train") -> pd.DataFrame:
    rows = frame[(frame["variant"] == variant) & (frame["split"] == split)
                 & (frame["adapt_steps"] == steps) & (frame["phase"] == phase)]
    return rows[rows["outer_iter"] == rows["outer_iter"].max()].set_index("seed")


def calibrate_inner_sigma(config: ExperimentConfig, out: Path, n_seeds: int) -> float:
    """Best inner sigma of the sweep grid on seeds disjoint from the evaluation seeds"""
    if n_seeds <= 0:
        return config.noise.std
    seeds = ",".join(str(CALIBRATION_SEED_BASE + i) for i in range(n_seeds))
    sweep_config = with_overrides(config, kind="noise_sweep", sweep__task=config.task_family, seeds=seeds)
    sweep = ExperimentService(sweep_config, out).noise_sweep()
    if config.task_family == "classification":
        best = sweep.loc[sweep["accuracy_mean"].idxmax()]
    else:
        best = sweep.loc[sweep["loss_mean"].idxmin()]
    logger.info(f"🎯 Calibrated inner sigma for {config.task_family}: {best['std']:g}")
    return float(best["std"])


def check_sinusoid(out: Path, seeds: list, calibration_seeds: int) -> list:
    config = load_experiment_config(REPO / "configs" / "sinusoid.cfg")
    sigma = calibrate_inner_sigma(config, out / "sinusoid_calibration", calibration_seeds)
    config = with_overrides(config, seeds=",".join(map(str, seeds)), variants="vanilla,noise_inner,feedback",
                            noise__std=sigma)
    service = ExperimentService(config, out / "sinusoid")
    report = service.run()
    frame = pd.DataFrame([r.model_dump() for r in report.records])
    steps = config.evaluation.report_steps

    vanilla_test = _final(frame, "vanilla", "meta_test", steps)["loss_mean"]
    vanilla_train = _final(frame, "vanilla", "meta_train", steps)["loss_mean"]
    noise_test = _final(frame, "noise_inner", "meta_test", steps)["loss_mean"]
    results = [
        ("sinusoid", "inner sigma (calibrated)", True, f"{sigma:g}"),
        ("sinusoid", "inner-noise meta-test MSE <= 0.5x vanilla", noise_test.mean() <= 0.5 * vanilla_test.mean(),
         f"{noise_test.mean():.4f} vs {vanilla_test.mean():.4f}"),
        ("sinusoid", "vanilla meta-test MSE >= 3x meta-train", vanilla_test.mean() >= 3 * vanilla_train.mean(),
         f"{vanilla_test.mean():.4f} vs {vanilla_train.mean():.4f}"),
    ]

    fires_vanilla = fires_noise = 0
    for seed in seeds:
        fires_vanilla += service.diagnose(service.store.checkpoint_path(seed, "vanilla"), seed).memorization
        fires_noise += service.diagnose(service.store.checkpoint_path(seed, "noise_inner"), seed).memorization
    needed = int(np.ceil(0.8 * len(seeds)))
    results.append(("sinusoid", "memorization verdict: vanilla fires, inner noise does not",
                    fires_vanilla >= needed and len(seeds) - fires_noise >= needed,
                    f"vanilla {fires_vanilla}/{len(seeds)}, noise_inner {fires_noise}/{len(seeds)}"))

    target = frame[(frame["split"] == "target_task") & (frame["adapt_steps"] == steps)]
    before = target[target["outer_iter"] == 0].set_index("seed")["loss_mean"]
    after = target[target["outer_iter"] == config.feedback.iterations].set_index("seed")["loss_mean"]
    results.append(("sinusoid", "feedback lowers target-task MSE (median)", float((after - before).median()) < 0,
                    f"median change {float((after - before).median()):+.4f}"))
    return results


def check_classification(out: Path, seeds: list, calibration_seeds: int) -> list:
    config = load_experiment_config(REPO / "configs" / "classification.cfg")
    sigma = calibrate_inner_sigma(config, out / "classification_calibration", calibration_seeds)
    config = with_overrides(config, seeds=",".join(map(str, seeds)), variants="vanilla,noise_inner", noise__std=sigma)
    report = ExperimentService(config, out / "classification").run()
    frame = pd.DataFrame([r.model_dump() for r in report.records])
    steps = config.evaluation.report_steps
    chance = 1.0 / config.classification.k_way

    vanilla = _final(frame, "vanilla", "meta_test", steps)["accuracy_mean"].median()
    noise = _final(frame, "noise_inner", "meta_test", steps)["accuracy_mean"].median()
    return [
        ("classification", "inner sigma (calibrated)", True, f"{sigma:g}"),
        ("classification", "vanilla meta-test accuracy within 10 points of chance", abs(vanilla - chance) <= 0.10,
         f"{100 * vanilla:.1f}% (chance {100 * chance:.0f}%)"),
        ("classification", "inner noise beats vanilla by >= 15 points", noise - vanilla >= 0.15,
         f"{100 * noise:.1f}% vs {100 * vanilla:.1f}%"),
    ]


def check_sweep(out: Path, seeds: list, repeats: int) -> list:
    base = load_experiment_config(REPO / "configs" / "noise_sweep.cfg")
    interior = 0
    for repeat in range(repeats):
        offset = 1000 * (repeat + 1)
        config = with_overrides(base, seeds=",".join(str(s + offset) for s in seeds))
        sweep = ExperimentService(config, out / f"sweep_{repeat}").noise_sweep()
        metric = sweep["accuracy_mean"] if sweep["accuracy_mean"].notna().all() else -sweep["loss_mean"]
        best = int(metric.to_numpy().argmax())
        interior += 0 < best < len(sweep) - 1
    return [("sweep", "best sigma is interior", interior >= int(np.ceil(0.7 * repeats)), f"{interior}/{repeats} sweeps")]


def render_results(results: list, seeds: list, calibration_seeds: int) -> str:
    """Markdown summary of one acceptance run"""
    hashes = {
        name: config_hash(load_experiment_config(REPO / "configs" / f"{name}.cfg"))[:12]
        for name in ("sinusoid", "classification", "noise_sweep")
    }
    lines = [
        f"## Acceptance run {datetime.now(timezone.utc):%Y-%m-%d %H:%M} UTC",
        "",
        f"Seeds {seeds[0]}..{seeds[-1]}, {calibration_seeds} calibration seeds. "
        f"Config hashes: " + ", ".join(f"`{name}` {value}" for name, value in hashes.items()) + ".",
        "",
        "| Experiment | Check | Result | Detail |",
        "|---|---|---|---|",
    ]
    for experiment, name, passed, detail in results:
        lines.append(f"| {experiment} | {name} | {'pass' if passed else 'FAIL'} | {detail} |")
    return "\n".join(lines) + "\n"


def main() -> int:
    parser = argparse.ArgumentParser(description="Desk-scale acceptance checks")
    parser.add_argument("--out", default="runs/acceptance")
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--sweep-repeats", type=int, default=10)
    parser.add_argument("--calibration-seeds", type=int, default=2, help="0 keeps the configured sigma")
    parser.add_argument("--only", default="sinusoid,classification,sweep")
    parser.add_argument("--record", default=None, help="append the results table to this markdown file")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    out = Path(args.out)
    seeds = list(range(args.seeds))
    selected = set(args.only.split(","))
    results = []
    if "sinusoid" in selected:
        results += check_sinusoid(out, seeds, args.calibration_seeds)
    if "classification" in selected:
        results += check_classification(out, seeds, args.calibration_seeds)
    if "sweep" in selected:
        results += check_sweep(out, seeds, args.sweep_repeats)

    print("\n" + "=" * 60)
    print("📊 ACCEPTANCE RESULTS:")
    print("=" * 60)
    for experiment, name, passed, detail in results:
        print(f"{'✅' if passed else '❌'} [{experiment}] {name}: {detail}")
    print("=" * 60)

    if args.record:
        record = Path(args.record)
        with record.open("a", encoding="utf-8") as handle:
            handle.write("\n" + render_results(results, seeds, args.calibration_seeds))
        print(f"📝 Results appended to {record}")
    return 0 if all(passed for _, _, passed, _ in results) else 1


if __name__ == "__main__":
    sys.exit(main())
