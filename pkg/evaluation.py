"""Intent accuracy, conlleval-style chunk F1, overall accuracy and the uncoordinated-slot analysis."""

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import pandas as pd

from errors import LengthMismatch, MalformedTag

logger = logging.getLogger(__name__)


class ChunkSpan(NamedTuple):
    slot_type: str
    start: int  # inclusive
    end: int    # inclusive


def split_tag(tag):
    if tag == "O":
        return "O", ""
    prefix, sep, slot_type = tag.partition("-")
    if prefix not in ("B", "I") or not sep or not slot_type:
        raise MalformedTag(None, tag)
    return prefix, slot_type


def _scan_chunks(tags):
    """IOB2 chunking; returns (chunks, orphan positions where an I-x had to open a chunk)."""
    chunks = []
    orphans = []
    open_type = None
    start = 0
    for j, tag in enumerate(tags):
        prefix, slot_type = split_tag(tag)
        continues = prefix == "I" and open_type == slot_type
        if open_type is not None and not continues:
            chunks.append(ChunkSpan(open_type, start, j - 1))
            open_type = None
        if prefix == "B" or (prefix == "I" and not continues):
            if prefix == "I":
                orphans.append(j)
            open_type, start = slot_type, j
    if open_type is not None:
        chunks.append(ChunkSpan(open_type, start, len(tags) - 1))
    return chunks, orphans


def extract_chunks(tags):
    return _scan_chunks(tags)[0]


def strict_orphans(tags):
    """Positions a strict IOB2 reader would reject: I-x without an open chunk of type x."""
    return _scan_chunks(tags)[1]


def chunks_to_tags(chunks, length):
    tags = ["O"] * length
    for chunk in chunks:
        tags[chunk.start] = f"B-{chunk.slot_type}"
        for j in range(chunk.start + 1, chunk.end + 1):
            tags[j] = f"I-{chunk.slot_type}"
    return tags


def _check_aligned(pred_corpus, gold_corpus):
    if len(pred_corpus) != len(gold_corpus):
        raise LengthMismatch(min(len(pred_corpus), len(gold_corpus)) + 1, "corpora have different sizes")
    for line, (pred, gold) in enumerate(zip(pred_corpus, gold_corpus), start=1):
        if len(pred) != len(gold):
            raise LengthMismatch(line, f"{len(pred)} predicted vs {len(gold)} gold tags")


def _prf(correct, found_pred, found_gold):
    precision = correct / found_pred if found_pred else 0.0
    recall = correct / found_gold if found_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def slot_f1(pred_tags, gold_tags):
    """Micro-averaged chunk precision, recall and F1 over a corpus of tag sequences."""
    _check_aligned(pred_tags, gold_tags)
    correct = found_pred = found_gold = 0
    for pred, gold in zip(pred_tags, gold_tags):
        pred_chunks = set(extract_chunks(pred))
        gold_chunks = set(extract_chunks(gold))
        correct += len(pred_chunks & gold_chunks)
        found_pred += len(pred_chunks)
        found_gold += len(gold_chunks)
    return _prf(correct, found_pred, found_gold)


def per_type_scores(pred_tags, gold_tags):
    """Per slot type chunk scores as a DataFrame, sorted by type."""
    _check_aligned(pred_tags, gold_tags)
    rows = []
    for pred, gold in zip(pred_tags, gold_tags):
        pred_chunks = set(extract_chunks(pred))
        gold_chunks = set(extract_chunks(gold))
        rows += [{"slot_type": c.slot_type, "predicted": 1, "gold": 0, "correct": int(c in gold_chunks)} for c in pred_chunks]
        rows += [{"slot_type": c.slot_type, "predicted": 0, "gold": 1, "correct": 0} for c in gold_chunks]

    columns = ["slot_type", "predicted", "gold", "correct"]
    by_type = pd.DataFrame(rows, columns=columns).groupby("slot_type").agg(
        {"predicted": "sum", "gold": "sum", "correct": "sum"}
    ).reset_index()
    scores = [_prf(r.correct, r.predicted, r.gold) for r in by_type.itertuples()]
    by_type["precision"] = [s[0] for s in scores]
    by_type["recall"] = [s[1] for s in scores]
    by_type["f1"] = [s[2] for s in scores]
    return by_type.sort_values("slot_type").reset_index(drop=True)


def intent_accuracy(pred, gold):
    """`pred`/`gold` are aligned sequences of Example."""
    if len(pred) != len(gold):
        raise LengthMismatch(min(len(pred), len(gold)) + 1, "corpora have different sizes")
    if not gold:
        return 0.0
    return sum(p.intent == g.intent for p, g in zip(pred, gold)) / len(gold)


def overall_accuracy(pred, gold):
    _check_aligned([p.slot_labels for p in pred], [g.slot_labels for g in gold])
    if not gold:
        return 0.0
    hits = sum(p.intent == g.intent and tuple(p.slot_labels) == tuple(g.slot_labels) for p, g in zip(pred, gold))
    return hits / len(gold)


def find_uncoordinated(pred_tags):
    """Positions j with pred[j] = I-x and pred[j-1] not in {B-x, I-x} (always for j = 0)."""
    positions = []
    for j, tag in enumerate(pred_tags):
        prefix, slot_type = split_tag(tag)
        if prefix != "I":
            continue
        if j == 0 or split_tag(pred_tags[j - 1])[1] != slot_type:
            positions.append(j)
    return positions


@dataclass
class UncoordinatedCase:
    utterance: int
    position: int
    kind: str  # "BI", "IB" or "other"
    tokens: list
    pred: list
    gold: list


@dataclass
class ErrorReport:
    slot_errors: int = 0
    uncoordinated: int = 0
    bi_errors: int = 0
    ib_errors: int = 0
    other_unc: int = 0
    details: list = field(default_factory=list)

    @property
    def uncoordinated_share(self):
        """Uncoordinated slots per slot error; 0 when there are no slot errors."""
        return self.uncoordinated / self.slot_errors if self.slot_errors else 0.0

    def to_dict(self, with_details=False):
        payload = {
            "slot_errors": self.slot_errors,
            "uncoordinated": self.uncoordinated,
            "bi_errors": self.bi_errors,
            "ib_errors": self.ib_errors,
            "other_unc": self.other_unc,
            "uncoordinated_share": self.uncoordinated_share,
        }
        if with_details:
            payload["details"] = [asdict(case) for case in self.details]
        return payload

    def to_frame(self):
        return pd.DataFrame(
            [{"utterance": c.utterance, "position": c.position, "kind": c.kind,
              "token": c.tokens[c.position] if c.tokens else "", "pred": c.pred[c.position], "gold": c.gold[c.position]}
             for c in self.details],
            columns=["utterance", "position", "kind", "token", "pred", "gold"],
        )


def classify_position(pred, gold, j):
    if j == 0:
        return "other"
    if pred[j - 1] == gold[j - 1] and pred[j] != gold[j]:
        return "BI"
    if pred[j] == gold[j] and pred[j - 1] != gold[j - 1]:
        return "IB"
    return "other"


def classify_unc_errors(pred_tags, gold_tags, tokens=None):
    """Bucket every uncoordinated predicted position of a corpus into BI / IB / other."""
    _check_aligned(pred_tags, gold_tags)
    report = ErrorReport()
    for u, (pred, gold) in enumerate(zip(pred_tags, gold_tags)):
        pred, gold = list(pred), list(gold)
        report.slot_errors += sum(p != g for p, g in zip(pred, gold))
        for j in find_uncoordinated(pred):
            kind = classify_position(pred, gold, j)
            report.uncoordinated += 1
            if kind == "BI":
                report.bi_errors += 1
            elif kind == "IB":
                report.ib_errors += 1
            else:
                report.other_unc += 1
            words = list(tokens[u]) if tokens is not None else []
            report.details.append(UncoordinatedCase(u, j, kind, words, pred, gold))
    return report


def score_corpus(pred, gold):
    """All metrics for aligned Example corpora; `pred` carries predicted tags and intents."""
    pred_tags = [p.slot_labels for p in pred]
    gold_tags = [g.slot_labels for g in gold]
    precision, recall, f1 = slot_f1(pred_tags, gold_tags)
    report = classify_unc_errors(pred_tags, gold_tags, tokens=[g.tokens for g in gold])
    return {
        "intent_acc": intent_accuracy(pred, gold),
        "slot_precision": precision,
        "slot_recall": recall,
        "slot_f1": f1,
        "overall_acc": overall_accuracy(pred, gold),
        "errors": report,
    }


def metrics_json(metrics, with_details=False):
    payload = {k: v for k, v in metrics.items() if k != "errors"}
    payload["errors"] = metrics["errors"].to_dict(with_details=with_details)
    return payload


def metrics_table(metrics):
    report = metrics["errors"]
    rows = [
        ("Intent Acc (%)", 100 * metrics["intent_acc"]),
        ("Slot F1 (%)", 100 * metrics["slot_f1"]),
        ("Overall Acc (%)", 100 * metrics["overall_acc"]),
        ("Slot errors", report.slot_errors),
        ("Uncoordinated", report.uncoordinated),
        ("BI errors", report.bi_errors),
        ("IB errors", report.ib_errors),
        ("Other uncoordinated", report.other_unc),
        ("Uncoordinated share (%)", 100 * report.uncoordinated_share),
    ]
    table = pd.DataFrame(rows, columns=["Metric", "Value"])
    return table.to_string(index=False, float_format=lambda v: f"{v:.2f}")


def case_listing(report, context=3):
    """Text rendering of each uncoordinated case: tokens, gold and predicted rows around the position."""
    blocks = []
    for case in report.details:
        lo = max(0, case.position - context)
        hi = min(len(case.pred), case.position + context + 1)
        window = pd.DataFrame(
            {
                "Tokens": case.tokens[lo:hi] if case.tokens else [""] * (hi - lo),
                "Gold": case.gold[lo:hi],
                "Pred": case.pred[lo:hi],
            },
            index=range(lo, hi),
        ).T
        blocks.append(f"utterance {case.utterance}, position {case.position} [{case.kind}]\n{window.to_string()}")
    return "\n\n".join(blocks)
