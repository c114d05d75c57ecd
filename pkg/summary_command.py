"""Mean and standard deviation of metrics over repeated training runs."""

import json
import sys
from pathlib import Path

import pandas as pd

from errors import UsageError
from training import RESULTS_JSON

METRICS = ["intent_acc", "slot_f1", "overall_acc", "uncoordinated", "uncoordinated_share"]


def load_results(run_dirs):
    rows = []
    for run_dir in run_dirs:
        path = Path(run_dir) / RESULTS_JSON
        if not path.is_file():
            raise UsageError(f"no {RESULTS_JSON} in {run_dir}")
        results = json.loads(path.read_text(encoding="utf-8"))
        row = {"run": str(run_dir), "best_epoch": results["best_epoch"]}
        row.update({f"model.{k}": v for k, v in results["config"]["model"].items()})
        row["train.seed"] = results["config"]["train"]["seed"]
        for split in ("valid", "test"):
            metrics = results[split]
            for key in METRICS:
                row[f"{split}.{key}"] = metrics.get(key, metrics["errors"].get(key))
        rows.append(row)
    return pd.DataFrame(rows)


def summarize_runs(runs, by=()):
    """Aggregate per-run metrics; `by` groups runs by config keys such as model.lambda."""
    metric_columns = [c for c in runs.columns if c.startswith(("valid.", "test."))]
    if by:
        grouped = runs.groupby(list(by))[metric_columns]
        summary = grouped.agg(["mean", "std", "count"])
        summary.columns = [f"{metric}.{stat}" for metric, stat in summary.columns]
        return summary.reset_index()
    stats = runs[metric_columns].agg(["mean", "std"]).T
    stats["count"] = len(runs)
    return stats.reset_index().rename(columns={"index": "metric"})


def run(args):
    runs = load_results(args.runs)
    by = []
    for key in args.by or []:
        column = key if key.startswith(("model.", "train.")) else f"model.{key}"
        if column not in runs.columns:
            raise UsageError(f"unknown grouping key: {key}")
        by.append(column)

    summary = summarize_runs(runs, by)
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"), file=sys.stderr)
    if args.csv:
        summary.to_csv(args.csv, index=False)
    json.dump(json.loads(summary.to_json(orient="records")), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def register_command(subparsers):
    parser = subparsers.add_parser("summary", help="mean and std of results over repeated runs")
    parser.add_argument("--runs", nargs="+", required=True, help="output directories written by `train`")
    parser.add_argument("--by", action="append", help="group by a config key (e.g. lambda, alpha, lrm_count)")
    parser.add_argument("--csv", help="export the summary table as CSV")
    parser.set_defaults(func=run)
