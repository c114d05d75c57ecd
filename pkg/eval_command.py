import json
import logging
import sys
from pathlib import Path

from corpus import data_vocab, load_split, load_tagged, write_split
from errors import UsageError
from evaluation import metrics_json, metrics_table, per_type_scores, score_corpus
from model import load_checkpoint, predict_examples

logger = logging.getLogger(__name__)


def run(args):
    data_dir = Path(args.data)
    if not (data_dir / args.split).is_dir():
        raise UsageError(f"split directory not found: {data_dir / args.split}")
    gold = load_split(data_dir, args.split)

    if args.pred is not None:
        if not Path(args.pred).exists():
            raise UsageError(f"prediction path not found: {args.pred}")
        predicted = load_tagged(args.pred)
    else:
        model_dir = Path(args.model)
        if not (model_dir / "checkpoint.json").is_file():
            raise UsageError(f"no checkpoint in model directory: {model_dir}")
        model, vocab, _ = load_checkpoint(model_dir, vocab=data_vocab(data_dir))
        predicted = predict_examples(model, gold, vocab, batch_size=args.batch_size, use_lrm=not args.no_lrm)

    if args.dump_pred is not None:
        write_split(args.dump_pred, predicted)
        logger.info("wrote predictions to %s", args.dump_pred)

    metrics = score_corpus(predicted, gold)
    print(metrics_table(metrics), file=sys.stderr)
    if args.per_type:
        by_type = per_type_scores([p.slot_labels for p in predicted], [g.slot_labels for g in gold])
        print(by_type.to_string(index=False, float_format=lambda v: f"{v:.4f}"), file=sys.stderr)

    json.dump(metrics_json(metrics, with_details=args.details), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def register_command(subparsers):
    parser = subparsers.add_parser("eval", help="score a checkpoint or a prediction directory on a split")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", help="directory written by `train`")
    source.add_argument("--pred", help="prediction directory (seq.out + label) to score instead of a model")
    parser.add_argument("--data", required=True)
    parser.add_argument("--split", default="test")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--dump-pred", metavar="DIR", help="write predictions in dataset format")
    parser.add_argument("--no-lrm", action="store_true", help="bypass the LRM tables")
    parser.add_argument("--per-type", action="store_true", help="print per slot type scores to stderr")
    parser.add_argument("--details", action="store_true", help="include uncoordinated cases in the JSON")
    parser.set_defaults(func=run)
