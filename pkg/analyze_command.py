import json
import sys
from pathlib import Path

from corpus import load_tagged
from errors import UsageError
from evaluation import case_listing, classify_unc_errors


def analyze(pred_path, gold_path):
    pred = load_tagged(pred_path)
    gold = load_tagged(gold_path)
    tokens = [g.tokens for g in gold]
    return classify_unc_errors([p.slot_labels for p in pred], [g.slot_labels for g in gold], tokens=tokens)


def run(args):
    for path in (args.pred, args.gold):
        if not Path(path).exists():
            raise UsageError(f"path not found: {path}")
    report = analyze(args.pred, args.gold)

    print(report.to_frame().groupby("kind").size().to_string() if report.details else "no uncoordinated slots", file=sys.stderr)
    if report.details:
        print(case_listing(report, context=args.context), file=sys.stderr)
    if args.csv:
        report.to_frame().to_csv(args.csv, index=False)

    json.dump(report.to_dict(with_details=True), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def register_command(subparsers):
    parser = subparsers.add_parser("analyze", help="uncoordinated-slot error analysis of predictions against gold")
    parser.add_argument("--pred", required=True, help="prediction split directory or its seq.out")
    parser.add_argument("--gold", required=True, help="gold split directory or its seq.out")
    parser.add_argument("--context", type=int, default=3, help="tokens of context around each case")
    parser.add_argument("--csv", help="export the case table as CSV")
    parser.set_defaults(func=run)
