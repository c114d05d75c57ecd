import json
import logging
import sys
from pathlib import Path

from config import load_config
from errors import UsageError
from training import train

logger = logging.getLogger(__name__)


def run(args):
    overrides = list(args.override or [])
    overrides += [f"data_dir = {args.data}", f"out_dir = {args.out}"]
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    if not Path(args.data).is_dir():
        raise UsageError(f"data directory not found: {args.data}")

    model_cfg, train_cfg = load_config(args.config, overrides)
    results = train(model_cfg, train_cfg)
    json.dump({"best_epoch": results["best_epoch"], "valid": results["valid"], "test": results["test"]}, sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def register_command(subparsers):
    parser = subparsers.add_parser("train", help="train a model and keep the best validation checkpoint")
    parser.add_argument("--data", required=True, help="directory with train/ valid/ test/ splits")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--override", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    parser.set_defaults(func=run)
