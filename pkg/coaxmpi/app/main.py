import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from .commands import pipeline
from .config import env_log_level, env_out_dir, env_threads, load_run_config
from .errors import ConfigurationError, DatasetFormatError, ModelFormatError

# Load .env from the repository root (3 levels up from this file)
env_path = Path(__file__).parent.parent.parent / ".env"
load_dotenv(dotenv_path=env_path, override=True)

logger = logging.getLogger("coaxmpi")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration (defaults everywhere if omitted)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config file")
    common.add_argument("--out", type=Path, help="output directory (default: $COAXMPI_OUT or ./artifacts)")
    common.add_argument("--threads", type=int, help="worker processes or threads (default: $COAXMPI_THREADS or 1)")
    common.add_argument("--log-level", help="logging level (default: $COAXMPI_LOG_LEVEL or INFO)")

    parser = argparse.ArgumentParser(prog="coaxmpi", description="Coaxial LiDAR multipath simulation and correction.")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", parents=[common], help="simulate the labeled multipath dataset")
    generate.add_argument("--n", type=int, help="sample count (overrides dataset.n)")
    generate.add_argument("--mode", choices=("trace", "analytic"), help="measurement mode (overrides dataset.mode)")

    tune = sub.add_parser("tune", parents=[common], help="TPE search for booster and KNN hyperparameters")
    tune.add_argument("--dataset", type=Path)

    train = sub.add_parser("train", parents=[common], help="fit the booster on the training split")
    train.add_argument("--dataset", type=Path)
    train.add_argument("--hyperparams", type=Path)

    evaluate = sub.add_parser("eval", parents=[common], help="score a saved model against raw depth")
    evaluate.add_argument("--dataset", type=Path)
    evaluate.add_argument("--model", type=Path)

    scene = sub.add_parser("scene", parents=[common], help="render the corner scene, optionally corrected")
    scene.add_argument("--model", type=Path)
    scene.add_argument("--mode", choices=("trace", "analytic"), help="measurement mode (overrides scene.mode)")

    report = sub.add_parser("report", parents=[common], help="booster vs KNN comparison table")
    report.add_argument("--artifacts", type=Path, help="artifact directory (default: --out)")
    return parser


def run(args: argparse.Namespace):
    config = load_run_config(args.config).seeded(args.seed)
    out = args.out or env_out_dir()
    threads = args.threads if args.threads is not None else env_threads()
    if threads < 1:
        raise ConfigurationError(f"--threads must be >= 1, got {threads}")

    if args.command == "generate":
        if args.mode:
            config = config.model_copy(update={"dataset": config.dataset.model_copy(update={"mode": args.mode})})
        if args.n is not None and args.n < 1:
            raise ConfigurationError(f"--n must be >= 1, got {args.n}")
        return pipeline.cmd_generate(config, out, n=args.n, threads=threads)
    if args.command == "tune":
        return pipeline.cmd_tune(config, out, dataset=args.dataset, threads=threads)
    if args.command == "train":
        return pipeline.cmd_train(config, out, dataset=args.dataset, hyperparams=args.hyperparams, threads=threads)
    if args.command == "eval":
        return pipeline.cmd_eval(config, out, model=args.model, dataset=args.dataset)
    if args.command == "scene":
        if args.mode:
            config = config.model_copy(update={"scene": config.scene.model_copy(update={"mode": args.mode})})
        return pipeline.cmd_scene(config, out, model=args.model, threads=threads)
    if args.command == "report":
        return pipeline.cmd_report(config, args.artifacts or out, threads=threads)
    raise ConfigurationError(f"unknown command {args.command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or env_log_level()).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s: %(message)s")

    try:
        result = run(args)
    except ConfigurationError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except (DatasetFormatError, ModelFormatError) as e:
        logger.error("format error: %s", e)
        return EXIT_FORMAT
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_FAILURE

    print(result.model_dump_json())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
