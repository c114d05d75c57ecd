import json

import pytest

from conftest import tiny_cli_overrides
from corpus import Example, load_split, write_split
from main import main


def overrides(**extra):
    args = []
    for pair in tiny_cli_overrides(**extra):
        args += ["--override", pair]
    return args


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 and out.strip() else None)


@pytest.fixture
def trained_dir(toy_data_dir, tmp_path, capsys):
    out = tmp_path / "run"
    code, _ = run_cli(capsys, "train", "--data", str(toy_data_dir), "--out", str(out), "--seed", "1", *overrides())
    assert code == 0
    return out


def test_train_writes_artifacts(trained_dir):
    for name in ("checkpoint.bin", "checkpoint.json", "vocab.json", "metrics.jsonl", "results.json"):
        assert (trained_dir / name).is_file()
    records = (trained_dir / "metrics.jsonl").read_text().splitlines()
    assert len(records) == 2
    assert "valid_uncoordinated" in json.loads(records[0])


def test_train_is_reproducible(toy_data_dir, tmp_path, capsys):
    for name in ("a", "b"):
        code, _ = run_cli(capsys, "train", "--data", str(toy_data_dir), "--out", str(tmp_path / name), "--seed", "5", *overrides())
        assert code == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()


def test_train_rejects_unknown_key(toy_data_dir, tmp_path, capsys):
    code, _ = run_cli(capsys, "train", "--data", str(toy_data_dir), "--out", str(tmp_path / "x"), "--override", "colour=blue")
    assert code == 2


def test_train_rejects_missing_data(tmp_path, capsys):
    code, _ = run_cli(capsys, "train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "x"))
    assert code == 2


def test_eval_gold_against_gold(toy_data_dir, capsys):
    code, metrics = run_cli(capsys, "eval", "--pred", str(toy_data_dir / "test"), "--data", str(toy_data_dir))
    assert code == 0
    assert metrics["slot_f1"] == 1.0
    assert metrics["overall_acc"] == 1.0
    assert metrics["errors"]["uncoordinated"] == 0


def test_eval_missing_model(toy_data_dir, tmp_path, capsys):
    code, _ = run_cli(capsys, "eval", "--model", str(tmp_path / "missing"), "--data", str(toy_data_dir))
    assert code == 2


def test_eval_checkpoint_and_dump(trained_dir, toy_data_dir, tmp_path, capsys):
    dump = tmp_path / "pred"
    code, metrics = run_cli(
        capsys, "eval", "--model", str(trained_dir), "--data", str(toy_data_dir), "--split", "valid",
        "--dump-pred", str(dump), "--details", "--per-type",
    )
    assert code == 0
    assert 0.0 <= metrics["slot_f1"] <= 1.0
    assert "details" in metrics["errors"]
    code, rescored = run_cli(capsys, "eval", "--pred", str(dump), "--data", str(toy_data_dir), "--split", "valid")
    assert rescored["overall_acc"] == metrics["overall_acc"]


def test_analyze_uncoordinated_example(tmp_path, capsys):
    tokens = ("fly", "to", "paris", "on", "friday", "morning")
    write_split(tmp_path / "gold", [Example(tokens, ("O", "B-city", "I-city", "O", "B-time", "I-time"), "flight")])
    write_split(tmp_path / "pred", [Example(tokens, ("O", "B-city", "I-time", "O", "B-city", "I-time"), "flight")])
    code, report = run_cli(capsys, "analyze", "--pred", str(tmp_path / "pred"), "--gold", str(tmp_path / "gold"))
    assert code == 0
    assert (report["uncoordinated"], report["bi_errors"], report["ib_errors"]) == (2, 1, 1)
    assert [case["kind"] for case in report["details"]] == ["BI", "IB"]


def test_bench_reports_both_modes(trained_dir, toy_data_dir, tmp_path, capsys):
    csv = tmp_path / "timings.csv"
    code, summary = run_cli(
        capsys, "bench", "--model", str(trained_dir), "--data", str(toy_data_dir), "--warmup", "2", "--repeat", "2",
        "--csv", str(csv),
    )
    assert code == 0
    assert set(summary["lrm_on"]) == {"mean_ms", "median_ms", "p95_ms"}
    assert summary["utterances"] == 3
    assert summary["predictions_stable"] is True
    assert summary["on_off_ratio"] > 0
    assert len(csv.read_text().splitlines()) == 1 + 3 * 2


def test_summary_over_runs(trained_dir, capsys):
    code, rows = run_cli(capsys, "summary", "--runs", str(trained_dir), str(trained_dir), "--by", "lambda")
    assert code == 0
    assert rows[0]["model.lambda"] == 0.75
    assert rows[0]["test.overall_acc.count"] == 2
    code, _ = run_cli(capsys, "summary", "--runs", str(trained_dir), "--by", "nothing")
    assert code == 2


@pytest.fixture
def other_corpus(tmp_path):
    data_dir = tmp_path / "other"
    example = Example(("play", "some", "jazz"), ("O", "O", "B-genre"), "PlayMusic")
    for split in ("train", "valid", "test"):
        write_split(data_dir / split, [example])
    return data_dir


def test_eval_rejects_checkpoint_from_another_corpus(trained_dir, other_corpus, capsys):
    code, _ = run_cli(capsys, "eval", "--model", str(trained_dir), "--data", str(other_corpus))
    assert code == 1


def test_bench_rejects_checkpoint_from_another_corpus(trained_dir, other_corpus, capsys):
    code, _ = run_cli(capsys, "bench", "--model", str(trained_dir), "--data", str(other_corpus), "--repeat", "1")
    assert code == 1


def test_eval_without_train_split_uses_checkpoint_vocabulary(trained_dir, toy_data_dir, tmp_path, capsys):
    data_dir = tmp_path / "test_only"
    write_split(data_dir / "test", load_split(toy_data_dir, "test"))
    code, metrics = run_cli(capsys, "eval", "--model", str(trained_dir), "--data", str(data_dir))
    assert code == 0
    assert 0.0 <= metrics["overall_acc"] <= 1.0
