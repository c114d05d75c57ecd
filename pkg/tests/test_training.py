import json
import math
from dataclasses import replace

import pytest
import torch

from config import ModelConfig, TrainConfig
from conftest import tiny_config
from corpus import Batch
from model import Prediction, build_model
from training import (
    METRICS_LOG, RESULTS_JSON, TrainState, combine_slg, compute_losses, loss_slg, loss_slu, total_loss, train,
    untrained_prefixes,
)


def fake_batch(lengths, n_intents=21, n_slots=120, seed=0):
    gen = torch.Generator().manual_seed(seed)
    width = max(lengths)
    pad_mask = torch.tensor([[True] * (n + 1) + [False] * (width - n) for n in lengths])
    slot_ids = torch.randint(2, 2 + n_slots, (len(lengths), width), generator=gen).masked_fill(~pad_mask[:, 1:], 0)
    return Batch(
        token_ids=torch.zeros(len(lengths), width + 1, dtype=torch.long),
        slot_ids=slot_ids,
        intent_ids=torch.randint(0, n_intents, (len(lengths),), generator=gen),
        pad_mask=pad_mask,
        lengths=torch.tensor(lengths),
    )


def one_hot_prediction(batch, n_intents=21, n_slots=120, scale=1e4):
    intent = torch.nn.functional.one_hot(batch.intent_ids, n_intents).float() * scale
    targets = batch.slot_targets.clamp(min=0)
    slots = torch.nn.functional.one_hot(targets, n_slots).float() * scale
    return Prediction(intent, slots)


def test_uniform_logits_loss():
    batch = fake_batch([3, 5, 4])
    pred = Prediction(torch.zeros(3, 21), torch.zeros(3, 5, 120))
    expected = math.log(21) + 4 * math.log(120)
    assert loss_slu(pred, batch).item() == pytest.approx(expected, rel=1e-6)


def test_perfect_prediction_has_zero_loss():
    batch = fake_batch([2, 6])
    assert loss_slu(one_hot_prediction(batch), batch).item() == pytest.approx(0.0, abs=1e-6)


def test_duplicated_batch_keeps_mean():
    batch = fake_batch([3, 2])
    pred = Prediction(torch.randn(2, 21), torch.randn(2, 3, 120))
    doubled = Batch(
        torch.cat([batch.token_ids] * 2), torch.cat([batch.slot_ids] * 2), torch.cat([batch.intent_ids] * 2),
        torch.cat([batch.pad_mask] * 2), torch.cat([batch.lengths] * 2),
    )
    doubled_pred = Prediction(torch.cat([pred.intent_logits] * 2), torch.cat([pred.slot_logits] * 2))
    assert loss_slu(doubled_pred, doubled).item() == pytest.approx(loss_slu(pred, batch).item(), rel=1e-6)


def test_padded_logits_do_not_change_losses():
    batch = fake_batch([2, 5])
    pred = Prediction(torch.randn(2, 21), torch.randn(2, 5, 120))
    slg = torch.randn(2, 5, 120)
    noisy_slots = pred.slot_logits.clone()
    noisy_slots[0, 2:] = 1e3 * torch.randn(3, 120)
    noisy_slg = slg.clone()
    noisy_slg[0, 2:] = -7.0
    noisy = Prediction(pred.intent_logits, noisy_slots)
    assert loss_slu(noisy, batch).item() == pytest.approx(loss_slu(pred, batch).item(), rel=1e-6)
    for a, b in zip(loss_slg(slg, batch, pred), loss_slg(noisy_slg, batch, noisy)):
        assert a.item() == pytest.approx(b.item(), rel=1e-6)


def test_uniform_generation_loss():
    batch = fake_batch([4, 4])
    nll, _ = loss_slg(torch.zeros(2, 4, 120), batch, Prediction(torch.zeros(2, 21), torch.zeros(2, 4, 120)))
    assert nll.item() == pytest.approx(math.log(120), rel=1e-6)


def test_consistency_vanishes_when_decoder_agrees():
    batch = fake_batch([3, 1])
    slu = Prediction(torch.zeros(2, 21), torch.randn(2, 3, 120))
    slg_logits = torch.nn.functional.one_hot(slu.slot_argmax, 120).float() * 1e4
    _, consistency = loss_slg(slg_logits, batch, slu)
    assert consistency.item() == pytest.approx(0.0, abs=1e-6)


def test_total_loss_mixing():
    assert total_loss(torch.tensor(2.0), torch.tensor(1.0), 0.75).item() == pytest.approx(2.75)
    assert total_loss(torch.tensor(2.0), torch.tensor(9.0), 0.0).item() == 2.0
    assert combine_slg(torch.tensor(1.0), torch.tensor(3.0), 0.35).item() == pytest.approx(0.65 + 1.05)


def test_breakdown_recomposes_total(toy_vocab, toy_batch):
    model = build_model(tiny_config(toy_vocab), toy_vocab)
    losses = compute_losses(model(toy_batch, train=True), toy_batch, alpha=0.35, lam=0.75)
    parts = losses.as_floats()
    recomposed = parts["l_slu"] + 0.75 * (0.65 * parts["l_slg_nll"] + 0.35 * parts["l_slg_consistency"])
    assert parts["total"] == pytest.approx(recomposed, rel=1e-5)


def test_without_decoder_total_is_slu_loss(toy_vocab, toy_batch):
    model = build_model(tiny_config(toy_vocab, lambda_=0.0), toy_vocab)
    output = model(toy_batch, train=True)
    assert output.slg_logits is None
    losses = compute_losses(output, toy_batch, alpha=0.35, lam=0.0)
    assert losses.total.item() == losses.l_slu.item()


def decoder_and_slot_grads(model, batch, alpha, lam):
    model.zero_grad()
    compute_losses(model(batch, train=True), batch, alpha, lam).total.backward()
    return model.decoder.out.weight.grad.clone(), model.classifier.slot.weight.grad.clone()


def test_decoder_gradient_scales_with_lambda(toy_vocab, toy_batch):
    model = build_model(tiny_config(toy_vocab), toy_vocab)
    half, _ = decoder_and_slot_grads(model, toy_batch, 0.35, 0.5)
    full, _ = decoder_and_slot_grads(model, toy_batch, 0.35, 1.0)
    assert torch.allclose(full, 2 * half, atol=1e-6)


def test_slot_head_gradient_ignores_alpha(toy_vocab, toy_batch):
    model = build_model(tiny_config(toy_vocab, lrm_count=0), toy_vocab)
    _, low = decoder_and_slot_grads(model, toy_batch, 0.0, 0.75)
    _, high = decoder_and_slot_grads(model, toy_batch, 0.9, 0.75)
    assert torch.allclose(low, high, atol=1e-7)


def test_selection_prefers_overall_then_f1():
    state = TrainState(best_key=(0.8, 0.9))
    assert state.improves({"overall_acc": 0.81, "slot_f1": 0.1})
    assert state.improves({"overall_acc": 0.8, "slot_f1": 0.95})
    assert not state.improves({"overall_acc": 0.8, "slot_f1": 0.9})


def toy_run(data_dir, out_dir, epochs=3, **model_overrides):
    base = dict(d_model=16, d_ff=32, n_enc_layers=2, n_dec_layers=1, n_heads=2, dropout=0.1, rel_clip=4, lrm_after_layer=1)
    base.update(model_overrides)
    train_cfg = TrainConfig(
        data_dir=str(data_dir), out_dir=str(out_dir), seed=3, max_epochs=epochs, batch_size=4, lr=0.005, max_len=16,
    )
    results = train(ModelConfig(**base), train_cfg)
    records = [json.loads(line) for line in (out_dir / METRICS_LOG).read_text().splitlines()]
    return results, records


def test_training_writes_results_and_learns(toy_data_dir, tmp_path):
    results, records = toy_run(toy_data_dir, tmp_path / "run", epochs=2)
    assert len(records) == 2
    assert records[1]["train_total"] < records[0]["train_total"]
    assert results["best_epoch"] in {1, 2}
    assert set(results) == {"config", "best_epoch", "valid", "test"}
    assert (tmp_path / "run" / RESULTS_JSON).is_file()
    assert (tmp_path / "run" / "checkpoint.bin").is_file()
    assert 0.0 <= results["test"]["overall_acc"] <= 1.0


def test_training_is_reproducible(toy_data_dir, tmp_path):
    toy_run(toy_data_dir, tmp_path / "a")
    toy_run(toy_data_dir, tmp_path / "b")
    assert (tmp_path / "a" / METRICS_LOG).read_text() == (tmp_path / "b" / METRICS_LOG).read_text()


def test_frozen_zero_lrm_follows_basic_model(toy_data_dir, tmp_path):
    _, reduced = toy_run(toy_data_dir, tmp_path / "reduced", lrm_frozen_zero=True, lambda_=0.0, alpha=0.0)
    _, basic = toy_run(toy_data_dir, tmp_path / "basic", lrm_count=0, lambda_=0.0, alpha=0.0)
    assert reduced == basic


def test_untrained_parameter_groups(tiny_cfg):
    assert untrained_prefixes(tiny_cfg) == ()
    assert untrained_prefixes(replace(tiny_cfg, lambda_=0.0)) == ("decoder.",)
    separate = replace(tiny_cfg, lrm_embedding="argmax", lrm_shared_classifier=False)
    assert untrained_prefixes(separate) == ("lrm_classifiers.",)
    assert untrained_prefixes(replace(separate, lrm_embedding="soft")) == ()


def test_argmax_lrm_with_separate_heads_trains(toy_data_dir, tmp_path):
    results, records = toy_run(
        toy_data_dir, tmp_path / "run", epochs=1, lrm_embedding="argmax", lrm_shared_classifier=False,
    )
    assert len(records) == 1
    assert results["best_epoch"] == 1
