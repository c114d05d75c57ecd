"""Dataset loading, vocabularies and padded batches for the seq.in / seq.out / label layout."""

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Sampler

from errors import EmptyCorpus, LengthMismatch, MalformedTag, SequenceTooLong, UnknownLabel

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
TAG_PATTERN = re.compile(r"^(O|[BI]-\S+)$")

PAD = "<pad>"
UNK = "<unk>"
CLS = "<cls>"
BOS = "<bos>"
TOKEN_SPECIALS = (PAD, UNK, CLS)
SLOT_SPECIALS = (PAD, BOS)

IGNORE_INDEX = -100


@dataclass(frozen=True)
class Example:
    tokens: tuple
    slot_labels: tuple
    intent: str


def _read_lines(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    return lines


def check_tag(tag, line):
    if not TAG_PATTERN.match(tag):
        raise MalformedTag(line, tag)
    return tag


def load_split(data_dir, split):
    """Read one split directory; tokens are lowercased, tags and intents kept verbatim."""
    split_dir = Path(data_dir) / split
    seq_in = _read_lines(split_dir / "seq.in")
    seq_out = _read_lines(split_dir / "seq.out")
    labels = _read_lines(split_dir / "label")

    n = max(len(seq_in), len(seq_out), len(labels))
    if not len(seq_in) == len(seq_out) == len(labels):
        first_missing = min(len(seq_in), len(seq_out), len(labels)) + 1
        raise LengthMismatch(
            first_missing,
            f"seq.in={len(seq_in)} seq.out={len(seq_out)} label={len(labels)} lines",
        )

    examples = []
    for i in range(n):
        line = i + 1
        tokens = seq_in[i].lower().split()
        tags = seq_out[i].split()
        if len(tokens) != len(tags):
            raise LengthMismatch(line, f"{len(tokens)} tokens vs {len(tags)} tags")
        if not tokens:
            raise LengthMismatch(line, "empty utterance")
        for tag in tags:
            check_tag(tag, line)
        examples.append(Example(tuple(tokens), tuple(tags), labels[i].strip()))

    logger.debug("loaded %d examples from %s", len(examples), split_dir)
    return examples


def load_tagged(path):
    """Load a prediction or gold file set; `path` is a split directory or its seq.out file."""
    path = Path(path)
    split_dir = path if path.is_dir() else path.parent
    tags = [line.split() for line in _read_lines(split_dir / "seq.out")]
    intents = [line.strip() for line in _read_lines(split_dir / "label")]
    if len(tags) != len(intents):
        raise LengthMismatch(min(len(tags), len(intents)) + 1, "seq.out and label line counts differ")
    if (split_dir / "seq.in").exists():
        tokens = [line.lower().split() for line in _read_lines(split_dir / "seq.in")]
        if len(tokens) != len(tags):
            raise LengthMismatch(min(len(tokens), len(tags)) + 1, "seq.in and seq.out line counts differ")
    else:
        tokens = [["_"] * len(t) for t in tags]
    for line, (tok, row) in enumerate(zip(tokens, tags), start=1):
        if len(tok) != len(row):
            raise LengthMismatch(line, f"{len(tok)} tokens vs {len(row)} tags")
        for tag in row:
            check_tag(tag, line)
    return [Example(tuple(tok), tuple(tag), intent) for tok, tag, intent in zip(tokens, tags, intents)]


def write_split(split_dir, examples):
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    (split_dir / "seq.in").write_text("".join(" ".join(e.tokens) + "\n" for e in examples), encoding="utf-8")
    (split_dir / "seq.out").write_text("".join(" ".join(e.slot_labels) + "\n" for e in examples), encoding="utf-8")
    (split_dir / "label").write_text("".join(e.intent + "\n" for e in examples), encoding="utf-8")


class Vocabulary:
    """Immutable id maps; specials occupy the lowest ids, the rest is sorted."""

    pad_id = 0
    unk_id = 1
    cls_id = 2
    slot_pad_id = 0
    bos_id = 1
    slot_offset = len(SLOT_SPECIALS)

    def __init__(self, tokens, slots, intents):
        self.tokens = tuple(tokens)
        self.slots = tuple(slots)
        self.intents = tuple(intents)
        if self.tokens[: len(TOKEN_SPECIALS)] != TOKEN_SPECIALS or self.slots[: len(SLOT_SPECIALS)] != SLOT_SPECIALS:
            raise ValueError("vocabulary specials are missing or out of order")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.slot_to_id = {s: i for i, s in enumerate(self.slots)}
        self.intent_to_id = {s: i for i, s in enumerate(self.intents)}
        if len(self.token_to_id) != len(self.tokens) or len(self.slot_to_id) != len(self.slots):
            raise ValueError("vocabulary entries must be unique")

    @property
    def num_intents(self):
        return len(self.intents)

    @property
    def num_slot_labels(self):
        return len(self.slots) - self.slot_offset

    @property
    def slot_labels(self):
        return self.slots[self.slot_offset:]

    def token_id(self, token):
        return self.token_to_id.get(token, self.unk_id)

    def slot_id(self, tag):
        try:
            return self.slot_to_id[tag]
        except KeyError:
            raise UnknownLabel("slot", tag) from None

    def intent_id(self, intent):
        try:
            return self.intent_to_id[intent]
        except KeyError:
            raise UnknownLabel("intent", intent) from None

    def slot_label(self, cls_index):
        return self.slots[cls_index + self.slot_offset]

    def to_json(self):
        payload = {
            "tokens": list(self.tokens),
            "slots": list(self.slots),
            "intents": list(self.intents),
            "specials": {
                "token_pad": self.pad_id,
                "token_unk": self.unk_id,
                "token_cls": self.cls_id,
                "slot_pad": self.slot_pad_id,
                "slot_bos": self.bos_id,
            },
        }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        return cls(payload["tokens"], payload["slots"], payload["intents"])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.digest())


def build_vocab(train):
    if not train:
        raise EmptyCorpus()
    tokens = sorted({t for e in train for t in e.tokens} - set(TOKEN_SPECIALS))
    slots = sorted({s for e in train for s in e.slot_labels})
    intents = sorted({e.intent for e in train})
    vocab = Vocabulary(TOKEN_SPECIALS + tuple(tokens), SLOT_SPECIALS + tuple(slots), intents)
    logger.info(
        "vocabulary: %d tokens, %d slot labels, %d intents",
        len(tokens), vocab.num_slot_labels, vocab.num_intents,
    )
    return vocab


def data_vocab(data_dir):
    """Vocabulary rebuilt from the train split of `data_dir`; None when there is no train split."""
    if not (Path(data_dir) / "train").is_dir():
        logger.warning("no train split under %s; trusting the checkpoint vocabulary", data_dir)
        return None
    return build_vocab(load_split(data_dir, "train"))


@dataclass
class Batch:
    token_ids: torch.Tensor   # [B, 1+T], CLS at column 0
    slot_ids: torch.Tensor    # [B, T], slot PAD id at padding
    intent_ids: torch.Tensor  # [B]
    pad_mask: torch.Tensor    # [B, 1+T], True = real
    lengths: torch.Tensor     # [B]
    slot_offset: int = len(SLOT_SPECIALS)

    @property
    def size(self):
        return self.token_ids.shape[0]

    @property
    def slot_mask(self):
        return self.pad_mask[:, 1:]

    @property
    def slot_targets(self):
        """Slot class indices in [0, d_s), IGNORE_INDEX at padding."""
        return (self.slot_ids - self.slot_offset).masked_fill(~self.slot_mask, IGNORE_INDEX)


def encode_batch(examples, vocab, max_len):
    for i, example in enumerate(examples):
        if len(example.tokens) != len(example.slot_labels):
            raise LengthMismatch(i, f"{len(example.tokens)} tokens vs {len(example.slot_labels)} tags")
        if len(example.tokens) > max_len:
            raise SequenceTooLong(i, len(example.tokens), max_len)

    size = len(examples)
    width = max(len(e.tokens) for e in examples)
    token_ids = torch.full((size, 1 + width), vocab.pad_id, dtype=torch.long)
    slot_ids = torch.full((size, width), vocab.slot_pad_id, dtype=torch.long)
    intent_ids = torch.empty(size, dtype=torch.long)
    lengths = torch.empty(size, dtype=torch.long)

    token_ids[:, 0] = vocab.cls_id
    for b, example in enumerate(examples):
        n = len(example.tokens)
        token_ids[b, 1 : 1 + n] = torch.tensor([vocab.token_id(t) for t in example.tokens])
        slot_ids[b, :n] = torch.tensor([vocab.slot_id(s) for s in example.slot_labels])
        intent_ids[b] = vocab.intent_id(example.intent)
        lengths[b] = n

    positions = torch.arange(1 + width).unsqueeze(0)
    pad_mask = positions < (lengths + 1).unsqueeze(1)
    return Batch(token_ids, slot_ids, intent_ids, pad_mask, lengths, vocab.slot_offset)


def decode_batch(batch, vocab):
    examples = []
    for b in range(batch.size):
        n = int(batch.lengths[b])
        tokens = tuple(vocab.tokens[i] for i in batch.token_ids[b, 1 : 1 + n].tolist())
        tags = tuple(vocab.slots[i] for i in batch.slot_ids[b, :n].tolist())
        examples.append(Example(tokens, tags, vocab.intents[int(batch.intent_ids[b])]))
    return examples


class BucketBatchSampler(Sampler):
    """Shuffled length-bucketed batches; the order depends only on (seed, epoch)."""

    def __init__(self, lengths, batch_size, bucket_size=50, seed=0, shuffle=True):
        self.lengths = np.asarray(lengths)
        self.batch_size = batch_size
        self.pool = batch_size * bucket_size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __iter__(self):
        if not self.shuffle:
            order = np.arange(len(self.lengths))
            yield from (order[i : i + self.batch_size].tolist() for i in range(0, len(order), self.batch_size))
            return

        rng = np.random.default_rng([self.seed, self.epoch])
        order = rng.permutation(len(self.lengths))
        batches = []
        for start in range(0, len(order), self.pool):
            pool = order[start : start + self.pool]
            pool = pool[np.argsort(self.lengths[pool], kind="stable")]
            batches.extend(pool[i : i + self.batch_size] for i in range(0, len(pool), self.batch_size))
        for idx in rng.permutation(len(batches)):
            yield batches[idx].tolist()

    def __len__(self):
        n = len(self.lengths)
        if not self.shuffle:
            return -(-n // self.batch_size)
        full_pools, rest = divmod(n, self.pool)
        return full_pools * (self.pool // self.batch_size) + -(-rest // self.batch_size)


def make_loader(examples, vocab, batch_size, max_len, shuffle=False, seed=0, bucket_size=50, num_workers=0):
    sampler = BucketBatchSampler(
        [len(e.tokens) for e in examples], batch_size, bucket_size=bucket_size, seed=seed, shuffle=shuffle
    )
    return DataLoader(
        examples,
        batch_sampler=sampler,
        collate_fn=partial(encode_batch, vocab=vocab, max_len=max_len),
        num_workers=num_workers,
    )
