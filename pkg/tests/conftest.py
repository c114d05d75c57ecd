import hypothesis
import pytest
import torch

from config import ModelConfig
from corpus import Example, build_vocab, encode_batch, write_split

hypothesis.settings.register_profile(
    "ci", deadline=None, max_examples=100,
    suppress_health_check=[hypothesis.HealthCheck.function_scoped_fixture],
)
hypothesis.settings.load_profile("ci")

TRAIN = [
    ("show flights from boston to denver", "O O O B-fromloc O B-toloc", "atis_flight"),
    ("what is the weather here on 2/7/2021", "O O O O B-location O B-time", "GetWeather"),
    ("list flights to new york", "O O O B-toloc I-toloc", "atis_flight"),
    ("weather in boston tomorrow", "O O B-location B-time", "GetWeather"),
    ("what is the fare to denver", "O O O O O B-toloc", "atis_airfare"),
    ("cheapest fare from new york", "B-cost O O B-fromloc I-fromloc", "atis_airfare"),
    ("flights from denver", "O O B-fromloc", "atis_flight"),
    ("will it rain in new york", "O O O O B-location I-location", "GetWeather"),
    ("fare from boston to new york", "O O B-fromloc O B-toloc I-toloc", "atis_airfare"),
    ("show me the weather tomorrow", "O O O O B-time", "GetWeather"),
]
VALID = [
    ("flights to boston", "O O B-toloc", "atis_flight"),
    ("weather in denver", "O O B-location", "GetWeather"),
    ("fare to new york", "O O B-toloc I-toloc", "atis_airfare"),
]
TEST = [
    ("show flights from new york to boston", "O O O B-fromloc I-fromloc O B-toloc", "atis_flight"),
    ("weather in seattle tomorrow", "O O B-location B-time", "GetWeather"),
    ("cheapest fare to denver", "B-cost O O B-toloc", "atis_airfare"),
]


def to_examples(rows):
    return [Example(tuple(text.split()), tuple(tags.split()), intent) for text, tags, intent in rows]


for _row in TRAIN + VALID + TEST:
    assert len(_row[0].split()) == len(_row[1].split()), f"toy row misaligned: {_row[0]!r}"


@pytest.fixture
def toy_examples():
    return {"train": to_examples(TRAIN), "valid": to_examples(VALID), "test": to_examples(TEST)}


@pytest.fixture
def toy_data_dir(tmp_path, toy_examples):
    data_dir = tmp_path / "data"
    for split, examples in toy_examples.items():
        write_split(data_dir / split, examples)
    return data_dir


@pytest.fixture
def toy_vocab(toy_examples):
    return build_vocab(toy_examples["train"])


@pytest.fixture
def toy_batch(toy_examples, toy_vocab):
    return encode_batch(toy_examples["train"][:4], toy_vocab, max_len=16)


def tiny_config(vocab, **overrides):
    base = dict(
        d_model=8, d_ff=16, n_enc_layers=2, n_dec_layers=2, n_heads=2, dropout=0.0,
        rel_clip=2, lrm_after_layer=1, lrm_count=1,
    )
    base.update(overrides)
    return ModelConfig(**base).with_vocab(vocab)


@pytest.fixture
def tiny_cfg(toy_vocab):
    return tiny_config(toy_vocab)


def tiny_cli_overrides(**extra):
    values = dict(
        d_model=16, d_ff=32, n_enc_layers=2, n_dec_layers=1, n_heads=2, dropout=0.1,
        rel_clip=4, lrm_after_layer=1, batch_size=4, max_epochs=2, lr=0.005,
    )
    values.update(extra)
    return [f"{k}={v}" for k, v in values.items()]


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
