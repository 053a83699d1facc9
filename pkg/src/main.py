"""
Command-line entry point

    python src/main.py train     --config configs/sinusoid.cfg [--seed 3] [--out runs/x]
    python src/main.py evaluate  --config ... --checkpoint runs/x/seed_0/vanilla/theta_final.bin
    python src/main.py feedback  --config ... [--checkpoint theta.bin] [--test-gradient grad.bin]
    python src/main.py sweep     --config ...
    python src/main.py diagnose  --config ... --checkpoint theta.bin

Exit codes: 0 success, 2 invalid config, 3 numerical failure, 4 contract violation, 1 other.
"""
import argparse
import logging
import sys
from typing import Dict, List, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from config import load_experiment_config, log_level
from errors import ConfigError, ContractViolation, NumericalFailure
from experiment_service import ExperimentService

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CONTRACT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="MAML with noise-augmented updates: experiment runner")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        command = commands.add_parser(name, help=help_text)
        command.add_argument("--config", required=True, help="Experiment config file (dotted key=value)")
        command.add_argument("--seed", type=int, help="Run a single seed (overrides the config's seeds)")
        command.add_argument("--out", help="Output directory (default: output_dir, then MAML_LAB_OUTPUT_ROOT)")
        return command

    add_command("train", "Meta-train every configured variant and seed")
    add_command("evaluate", "Evaluate a stored checkpoint on held-out tasks").add_argument(
        "--checkpoint", required=True, help="Parameter file (theta_*.bin)")
    feedback = add_command("feedback", "Feedback retraining (from a checkpoint, or train the base first)")
    feedback.add_argument("--checkpoint", help="theta* to retrain")
    feedback.add_argument("--test-gradient", help="Stored test-task gradient (test_gradient.bin)")
    add_command("sweep", "Sweep the inner-loop noise sigma")
    add_command("diagnose", "Memorization diagnostic of a checkpoint").add_argument(
        "--checkpoint", required=True, help="Parameter file (theta_*.bin)")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = str(args.seed)
    if args.command == "sweep":
        overrides["kind"] = "noise_sweep"
    if args.command == "feedback" and not args.checkpoint:
        overrides["kind"] = "feedback"
        overrides["variants"] = "feedback"
    return overrides


def run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, _overrides(args))
    service = ExperimentService(config, args.out)
    seed = config.seeds[0]

    if args.command in ("train", "sweep") or (args.command == "feedback" and not args.checkpoint):
        report = service.run()
        print("\n" + "=" * 60)
        print(f"📊 {config.kind.upper()} RESULTS ({len(config.seeds)} seeds)")
        print("=" * 60)
        print((service.store.root / "report.txt").read_text(encoding="utf-8"))
        print(f"✅ Outputs written to {report.output_dir}")

    elif args.command == "feedback":
        report = service.feedback_from_checkpoint(args.checkpoint, seed, args.test_gradient)
        print((service.store.root / "report.txt").read_text(encoding="utf-8"))
        print(f"✅ Outputs written to {report.output_dir}")

    elif args.command == "evaluate":
        frame = service.evaluate_checkpoint(args.checkpoint, seed)
        print(frame.to_string(index=False))
        print(f"✅ Evaluation written to {service.store.path('evaluate.csv')}")

    elif args.command == "diagnose":
        gap = service.diagnose(args.checkpoint, seed)
        print(gap.model_dump_json(indent=2))
        print("⚠️ Memorization detected" if gap.memorization else "✅ No memorization detected")

    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return run(args)
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"❌ Numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractViolation as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
