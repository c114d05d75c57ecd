"""Batch-size-1 inference latency, LRM on against LRM off with the same weights."""

import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import torch

from corpus import data_vocab, encode_batch, load_split
from errors import UsageError
from model import load_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkConfig:
    warmup: int = 50
    repeat: int = 1
    threads: int = 1


def _time_forward(model, batch, use_lrm):
    started = time.perf_counter()
    prediction = model.predict(batch, use_lrm=use_lrm)
    elapsed = time.perf_counter() - started
    return elapsed * 1000.0, prediction


def _labels(prediction):
    return int(prediction.intent_argmax[0]), tuple(prediction.slot_argmax[0].tolist())


def benchmark(model, batches, cfg=BenchmarkConfig()):
    """Time each utterance alone; LRM-on and LRM-off runs alternate per utterance."""
    torch.set_num_threads(cfg.threads)
    model.eval()

    for i in range(min(cfg.warmup, len(batches) * 2)):
        model.predict(batches[i % len(batches)], use_lrm=i % 2 == 0)

    rows = []
    reference = None
    stable = True
    for r in range(cfg.repeat):
        labels = []
        for u, batch in enumerate(batches):
            on_ms, prediction = _time_forward(model, batch, use_lrm=True)
            off_ms, _ = _time_forward(model, batch, use_lrm=False)
            rows.append({"repeat": r, "utterance": u, "lrm_on_ms": on_ms, "lrm_off_ms": off_ms})
            labels.append(_labels(prediction))
        if reference is None:
            reference = labels
        stable = stable and labels == reference

    timings = pd.DataFrame(rows)
    summary = {}
    for column, name in (("lrm_on_ms", "lrm_on"), ("lrm_off_ms", "lrm_off")):
        series = timings[column]
        summary[name] = {
            "mean_ms": float(series.mean()),
            "median_ms": float(series.median()),
            "p95_ms": float(series.quantile(0.95)),
        }
    summary["on_off_ratio"] = summary["lrm_on"]["mean_ms"] / summary["lrm_off"]["mean_ms"]
    summary["utterances"] = len(batches)
    summary["repeat"] = cfg.repeat
    summary["warmup"] = cfg.warmup
    summary["predictions_stable"] = stable
    return summary, timings


def run(args):
    model_dir = Path(args.model)
    if not (model_dir / "checkpoint.json").is_file():
        raise UsageError(f"no checkpoint in model directory: {model_dir}")
    if not (Path(args.data) / args.split).is_dir():
        raise UsageError(f"split directory not found: {Path(args.data) / args.split}")

    model, vocab, _ = load_checkpoint(model_dir, vocab=data_vocab(args.data))
    examples = load_split(args.data, args.split)
    # encoding happens up front so only the forward pass is timed
    batches = [encode_batch([e], vocab, max_len=len(e.tokens)) for e in examples]

    summary, timings = benchmark(model, batches, BenchmarkConfig(args.warmup, args.repeat, args.threads))
    table = timings[["lrm_on_ms", "lrm_off_ms"]].describe(percentiles=[0.5, 0.95]).T
    print(table.to_string(float_format=lambda v: f"{v:.3f}"), file=sys.stderr)
    if args.csv:
        timings.to_csv(args.csv, index=False)

    json.dump(summary, sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def register_command(subparsers):
    parser = subparsers.add_parser("bench", help="batch-size-1 latency with and without LRM")
    parser.add_argument("--model", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--split", default="test")
    parser.add_argument("--warmup", type=int, default=50)
    parser.add_argument("--repeat", type=int, default=1)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--csv", help="export per-utterance timings as CSV")
    parser.set_defaults(func=run)
