"""Joint SLU + SLG losses, the training loop and best-on-validation model selection."""

import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import torch

import numerics
from corpus import SPLITS, build_vocab, load_split, make_loader
from evaluation import metrics_json, score_corpus
from errors import NonFiniteLoss
from model import build_model, load_checkpoint, predict_examples, save_checkpoint

logger = logging.getLogger(__name__)

METRICS_LOG = "metrics.jsonl"
RESULTS_JSON = "results.json"


@dataclass
class LossBreakdown:
    l_slu: torch.Tensor
    l_slg_nll: torch.Tensor
    l_slg_consistency: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {
            "l_slu": float(self.l_slu),
            "l_slg_nll": float(self.l_slg_nll),
            "l_slg_consistency": float(self.l_slg_consistency),
            "total": float(self.total),
        }


def loss_slu(pred, batch):
    """Mean over the batch of intent NLL plus the summed slot NLL of the real tokens."""
    intent_nll = numerics.cross_entropy(pred.intent_logits, batch.intent_ids)
    slot_nll = numerics.cross_entropy(pred.slot_logits, batch.slot_targets).sum(dim=1)
    return (intent_nll + slot_nll).mean()


def loss_slg(slg_logits, batch, slu_pred):
    """(nll, consistency): token means of the generation NLL against gold tags and against
    the SLU branch's argmax labels. The SLU labels carry no gradient.
    """
    mask = batch.slot_mask
    n_tokens = mask.sum().clamp(min=1)
    nll = numerics.cross_entropy(slg_logits, batch.slot_targets).sum() / n_tokens

    slu_labels = numerics.stop_gradient(slu_pred.slot_argmax).masked_fill(~mask, numerics.IGNORE_INDEX)
    consistency = numerics.cross_entropy(slg_logits, slu_labels).sum() / n_tokens
    return nll, consistency


def combine_slg(nll, consistency, alpha):
    return (1 - alpha) * nll + alpha * consistency


def total_loss(l_slu, l_slg, lam):
    return l_slu + lam * l_slg


def compute_losses(output, batch, alpha, lam):
    l_slu = loss_slu(output.final, batch)
    if output.slg_logits is None:
        zero = l_slu.new_zeros(())
        return LossBreakdown(l_slu, zero, zero, l_slu)
    nll, consistency = loss_slg(output.slg_logits, batch, output.final)
    return LossBreakdown(l_slu, nll, consistency, total_loss(l_slu, combine_slg(nll, consistency, alpha), lam))


@dataclass
class TrainState:
    epoch: int = 0
    seed: int = 0
    best_epoch: int = 0
    best_key: tuple = (-1.0, -1.0)
    best_valid: dict = field(default_factory=dict)

    def improves(self, metrics):
        """Overall accuracy first, slot F1 breaks ties."""
        return (metrics["overall_acc"], metrics["slot_f1"]) > self.best_key


def evaluate_model(model, examples, vocab, batch_size, max_len, use_lrm=True):
    predicted = predict_examples(model, examples, vocab, batch_size=batch_size, max_len=max_len, use_lrm=use_lrm)
    return score_corpus(predicted, examples), predicted


def untrained_prefixes(cfg):
    """Parameter groups that receive no gradient under `cfg` and stay out of the optimizer."""
    prefixes = []
    if cfg.lambda_ == 0:
        prefixes.append("decoder.")
    # one-hot lookups do not backpropagate into a separate LRM head
    if cfg.lrm_embedding == "argmax" and not cfg.lrm_shared_classifier:
        prefixes.append("lrm_classifiers.")
    return tuple(prefixes)


def load_data(data_dir):
    return {split: load_split(data_dir, split) for split in SPLITS}


def _epoch_record(epoch, losses, steps, metrics):
    record = {"epoch": epoch}
    for key, value in losses.items():
        record[f"train_{key}"] = value / max(steps, 1)
    for key, value in metrics_json(metrics).items():
        if key == "errors":
            record.update({f"valid_{k}": v for k, v in value.items()})
        else:
            record[f"valid_{key}"] = value
    return record


def train(model_cfg, train_cfg, data=None):
    """Train, keep the best validation checkpoint in out_dir, then score it on test.

    Writes checkpoint.bin/json, vocab.json, metrics.jsonl and results.json.
    """
    numerics.set_seed(train_cfg.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)

    data = data or load_data(train_cfg.data_dir)
    vocab = build_vocab(data["train"])
    model = build_model(model_cfg, vocab)
    cfg = model.cfg

    params = numerics.ParamStore.from_module(model, skip_prefixes=untrained_prefixes(cfg))
    optimizer = numerics.make_adam(params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    loader = make_loader(
        data["train"], vocab, train_cfg.batch_size, train_cfg.max_len,
        shuffle=True, seed=train_cfg.seed, bucket_size=train_cfg.bucket_size,
    )

    out_dir = Path(train_cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / METRICS_LOG
    log_path.write_text("", encoding="utf-8")

    state = TrainState(seed=train_cfg.seed)
    logger.info("training %d parameters on %d examples", params.numel(), len(data["train"]))
    for epoch in range(1, train_cfg.max_epochs + 1):
        state.epoch = epoch
        started = time.perf_counter()
        loader.batch_sampler.set_epoch(epoch)
        sums = defaultdict(float)
        steps = 0
        for step, batch in enumerate(loader, start=1):
            output = model(batch, train=True)
            losses = compute_losses(output, batch, cfg.alpha, cfg.lambda_)
            if not math.isfinite(float(losses.total)):
                raise NonFiniteLoss(epoch, step, losses.as_floats())
            losses.total.backward()
            torch.nn.utils.clip_grad_norm_(list(params.values()), train_cfg.grad_clip)
            numerics.adam_step(params, optimizer)

            for key, value in losses.as_floats().items():
                sums[key] += value
            steps = step
            if step % train_cfg.log_every == 0:
                logger.debug("epoch %d step %d loss %.4f", epoch, step, float(losses.total))

        metrics, _ = evaluate_model(model, data["valid"], vocab, train_cfg.batch_size, train_cfg.max_len)
        record = _epoch_record(epoch, sums, steps, metrics)
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

        logger.info(
            "epoch %d: loss %.4f | valid intent %.2f f1 %.2f overall %.2f | uncoordinated %d (%.0fs)",
            epoch, record["train_total"], 100 * metrics["intent_acc"], 100 * metrics["slot_f1"],
            100 * metrics["overall_acc"], metrics["errors"].uncoordinated, time.perf_counter() - started,
        )
        if state.improves(metrics):
            state.best_key = (metrics["overall_acc"], metrics["slot_f1"])
            state.best_epoch = epoch
            state.best_valid = metrics_json(metrics)
            save_checkpoint(model, vocab, out_dir, extra={"epoch": epoch, "valid": state.best_valid})

    best_model, _, _ = load_checkpoint(out_dir, vocab)
    test_metrics, _ = evaluate_model(best_model, data["test"], vocab, train_cfg.batch_size, train_cfg.max_len)
    results = {
        "config": {"model": cfg.to_dict(), "train": train_cfg.to_dict()},
        "best_epoch": state.best_epoch,
        "valid": state.best_valid,
        "test": metrics_json(test_metrics),
    }
    (out_dir / RESULTS_JSON).write_text(json.dumps(results, indent=1, sort_keys=True), encoding="utf-8")
    logger.info(
        "best epoch %d: test intent %.2f f1 %.2f overall %.2f", state.best_epoch,
        100 * test_metrics["intent_acc"], 100 * test_metrics["slot_f1"], 100 * test_metrics["overall_acc"],
    )
    return results
