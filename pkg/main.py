import argparse
import logging
import sys

# Import commands
from train_command import register_command as register_train_command
from eval_command import register_command as register_eval_command
from bench_command import register_command as register_bench_command
from analyze_command import register_command as register_analyze_command
from summary_command import register_command as register_summary_command

from errors import SluError, UsageError

logger = logging.getLogger("lr_transformer")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


# 1. Parser
def build_parser():
    parser = argparse.ArgumentParser(
        prog="lr-transformer",
        description="Non-autoregressive joint intent detection and slot filling with layered refinement",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # 2. Register all commands
    register_train_command(subparsers)
    register_eval_command(subparsers)
    register_bench_command(subparsers)
    register_analyze_command(subparsers)
    register_summary_command(subparsers)
    return parser


# 3. Logging to stderr; stdout carries JSON only
def configure_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


# 4. Dispatch with exit codes
def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (SluError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


# 5. Run
if __name__ == "__main__":
    sys.exit(main())
