"""LR-Transformer: relative-position Transformer encoder with layered refinement (LRM),
joint intent/slot heads, and the training-only slot label generation (SLG) decoder.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

import numerics
from config import model_config_from_dict
from corpus import Example, Vocabulary, make_loader
from errors import CalledAtInference, ShapeMismatch, VocabMismatch

logger = logging.getLogger(__name__)

CHECKPOINT_BIN = "checkpoint.bin"
CHECKPOINT_JSON = "checkpoint.json"
VOCAB_JSON = "vocab.json"


@dataclass
class EncoderState:
    hidden: torch.Tensor    # [B, 1+T, d_model]
    pad_mask: torch.Tensor  # [B, 1+T]

    @property
    def slot_mask(self):
        return self.pad_mask[:, 1:]


@dataclass
class Prediction:
    intent_logits: torch.Tensor  # [B, d_i]
    slot_logits: torch.Tensor    # [B, T, d_s]

    @property
    def intent_probs(self):
        return torch.softmax(self.intent_logits, dim=-1)

    @property
    def slot_probs(self):
        return torch.softmax(self.slot_logits, dim=-1)

    @property
    def intent_argmax(self):
        return self.intent_logits.argmax(dim=-1)

    @property
    def slot_argmax(self):
        return self.slot_logits.argmax(dim=-1)

    def detach(self):
        return Prediction(self.intent_logits.detach(), self.slot_logits.detach())


@dataclass
class ModelOutput:
    state: EncoderState
    preliminary: Optional[Prediction]
    final: Prediction
    slg_logits: Optional[torch.Tensor] = None


def relative_index(q_len, k_len, clip, device=None):
    """Clipped signed distance key - query, shifted into [0, 2*clip]."""
    distance = torch.arange(k_len, device=device)[None, :] - torch.arange(q_len, device=device)[:, None]
    return distance.clamp(-clip, clip) + clip


class RelativeMultiHeadAttention(nn.Module):
    """Multi-head attention with relative position terms on keys and values, shared across heads."""

    def __init__(self, d_model, n_heads, dropout, rel_clip, relative=True):
        super().__init__()
        if d_model % n_heads:
            raise ShapeMismatch(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.dropout = dropout
        self.rel_clip = rel_clip
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.rel_keys = nn.Embedding(2 * rel_clip + 1, self.d_head) if relative else None
        self.rel_values = nn.Embedding(2 * rel_clip + 1, self.d_head) if relative else None

    def _heads(self, x):
        b, length, _ = x.shape
        return x.view(b, length, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x, key_mask, memory=None, causal=False, train=False):
        source = x if memory is None else memory
        if source.shape[:2] != key_mask.shape:
            raise ShapeMismatch(f"key mask {tuple(key_mask.shape)} vs keys {tuple(source.shape[:2])}")
        b, q_len, d_model = x.shape
        k_len = source.shape[1]

        q = self._heads(self.q_proj(x))
        k = self._heads(self.k_proj(source))
        v = self._heads(self.v_proj(source))

        scores = q @ k.transpose(-1, -2)
        if self.rel_keys is not None:
            index = relative_index(q_len, k_len, self.rel_clip, x.device)
            rel_k = self.rel_keys(index)
            rel_v = self.rel_values(index)
            scores = scores + torch.einsum("bhqd,qkd->bhqk", q, rel_k)
        scores = scores / math.sqrt(self.d_head)

        mask = key_mask[:, None, None, :]
        if causal:
            mask = mask & torch.ones(q_len, k_len, dtype=torch.bool, device=x.device).tril()
        weights = numerics.masked_softmax(scores, mask, dim=-1)
        weights = numerics.dropout(weights, self.dropout, train)

        out = weights @ v
        if self.rel_keys is not None:
            out = out + torch.einsum("bhqk,qkd->bhqd", weights, rel_v)
        out = out.transpose(1, 2).reshape(b, q_len, d_model)
        return numerics.check_finite(self.out_proj(out), "attention")


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff, dropout, activation="relu"):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)
        self.dropout = dropout
        self.activation = F.gelu if activation == "gelu" else F.relu

    def forward(self, x, train=False):
        return self.w2(numerics.dropout(self.activation(self.w1(x)), self.dropout, train))


class EncoderLayer(nn.Module):
    """Post-norm layer: relative self-attention then feed-forward, each with residual + layer norm."""

    def __init__(self, cfg):
        super().__init__()
        self.self_attn = RelativeMultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout, cfg.rel_clip)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout, cfg.ffn_activation)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = cfg.dropout

    def forward(self, x, pad_mask, train=False):
        x = self.norm1(x + numerics.dropout(self.self_attn(x, pad_mask, train=train), self.dropout, train))
        return self.norm2(x + numerics.dropout(self.ffn(x, train), self.dropout, train))


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.self_attn = RelativeMultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout, cfg.rel_clip)
        self.cross_attn = RelativeMultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout, cfg.rel_clip, relative=False)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout, cfg.ffn_activation)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = cfg.dropout

    def forward(self, x, label_mask, memory, memory_mask, train=False):
        p = self.dropout
        x = self.norm1(x + numerics.dropout(self.self_attn(x, label_mask, causal=True, train=train), p, train))
        x = self.norm2(x + numerics.dropout(self.cross_attn(x, memory_mask, memory=memory, train=train), p, train))
        return self.norm3(x + numerics.dropout(self.ffn(x, train), p, train))


class SluClassifier(nn.Module):
    """Intent from h_cls; slot j from h_j concatenated with h_cls."""

    def __init__(self, d_model, d_i, d_s):
        super().__init__()
        self.intent = nn.Linear(d_model, d_i)
        self.slot = nn.Linear(2 * d_model, d_s)

    def forward(self, hidden):
        h_cls = hidden[:, 0]
        h_tokens = hidden[:, 1:]
        slot_input = numerics.concat([h_tokens, h_cls.unsqueeze(1).expand_as(h_tokens)], dim=-1)
        return Prediction(self.intent(h_cls), self.slot(slot_input))


class LrmEmbeddings(nn.Module):
    """Result-embedding tables for one LRM insertion."""

    def __init__(self, d_i, d_s, d_e, frozen_zero=False):
        super().__init__()
        # torch.empty draws nothing from the RNG; init_model fills the trainable tables
        self.intent_table = nn.Parameter(torch.empty(d_i, d_e), requires_grad=not frozen_zero)
        self.slot_table = nn.Parameter(torch.empty(d_s, d_e), requires_grad=not frozen_zero)
        self.frozen_zero = frozen_zero

    def reset_parameters(self):
        with torch.no_grad():
            if self.frozen_zero:
                self.intent_table.zero_()
                self.slot_table.zero_()
            else:
                std = self.intent_table.shape[1] ** -0.5
                self.intent_table.normal_(0.0, std)
                self.slot_table.normal_(0.0, std)


def lrm_refine(state, classifier, tables, embedding="soft"):
    """Add preliminary-result embeddings to the hidden states after encoder layer k.

    h'_cls = h_cls + e^I + e^S_0 and h'_j = h_j + e^S_j, where e^S_0 pools e^S_j with a
    per-dimension softmax across real token positions. Padded positions pass through unchanged.
    """
    hidden = state.hidden
    preliminary = classifier(hidden)
    if embedding == "argmax":
        intent_dist = F.one_hot(preliminary.intent_argmax, tables.intent_table.shape[0]).to(hidden.dtype)
        slot_dist = F.one_hot(preliminary.slot_argmax, tables.slot_table.shape[0]).to(hidden.dtype)
    else:
        intent_dist = preliminary.intent_probs
        slot_dist = preliminary.slot_probs

    e_intent = intent_dist @ tables.intent_table
    token_mask = state.slot_mask.unsqueeze(-1)
    e_slots = (slot_dist @ tables.slot_table).masked_fill(~token_mask, 0.0)

    weights = numerics.masked_softmax(e_slots, token_mask, dim=1)
    e_utterance = (weights * e_slots).sum(dim=1)

    h_cls = hidden[:, :1] + (e_intent + e_utterance).unsqueeze(1)
    h_tokens = hidden[:, 1:] + e_slots
    refined = numerics.concat([h_cls, h_tokens], dim=1)
    return EncoderState(numerics.check_finite(refined, "lrm_refine"), state.pad_mask), preliminary


class SlgDecoder(nn.Module):
    """Teacher-forced Transformer decoder over slot labels; its own label-embedding table."""

    def __init__(self, cfg):
        super().__init__()
        self.d_model = cfg.d_model
        self.dropout = cfg.dropout
        self.label_embedding = nn.Embedding(cfg.n_slot_vocab, cfg.d_model)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.out = nn.Linear(cfg.d_model, cfg.d_s)

    def forward(self, memory, memory_mask, gold_slot_ids, label_mask, bos_id, train=False):
        bos = torch.full_like(gold_slot_ids[:, :1], bos_id)
        previous = numerics.concat([bos, gold_slot_ids[:, :-1]], dim=1)
        x = self.label_embedding(previous) * math.sqrt(self.d_model)
        x = numerics.dropout(x, self.dropout, train)
        for layer in self.layers:
            x = layer(x, label_mask, memory, memory_mask, train)
        return numerics.check_finite(self.out(x), "slg_decoder")


class LrTransformer(nn.Module):
    def __init__(self, cfg, bos_id=1):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.bos_id = bos_id
        self.token_embedding = nn.Embedding(cfg.n_tokens, cfg.d_model)
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.classifier = SluClassifier(cfg.d_model, cfg.d_i, cfg.d_s)
        self.decoder = SlgDecoder(cfg)
        self.lrm = nn.ModuleList(
            LrmEmbeddings(cfg.d_i, cfg.d_s, cfg.d_model, cfg.lrm_frozen_zero) for _ in range(cfg.lrm_count)
        )
        if cfg.lrm_shared_classifier:
            self.lrm_classifiers = None
        else:
            self.lrm_classifiers = nn.ModuleList(
                SluClassifier(cfg.d_model, cfg.d_i, cfg.d_s) for _ in range(cfg.lrm_count)
            )
        self._lrm_slots = {layer: slot for slot, layer in enumerate(cfg.lrm_layers)}
        init_model(self)

    def embed(self, token_ids, train=False):
        x = self.token_embedding(token_ids) * math.sqrt(self.cfg.d_model)
        return numerics.dropout(x, self.cfg.dropout, train)

    def encode(self, batch, train=False, use_lrm=True):
        """Embedding -> k layers -> LRM -> remaining layers -> classifier.

        Returns (final EncoderState, first preliminary Prediction or None, final Prediction).
        """
        state = EncoderState(self.embed(batch.token_ids, train), batch.pad_mask)
        preliminary = None
        for depth, layer in enumerate(self.encoder_layers, start=1):
            state = EncoderState(layer(state.hidden, state.pad_mask, train), state.pad_mask)
            slot = self._lrm_slots.get(depth)
            if use_lrm and slot is not None:
                classifier = self.classifier if self.lrm_classifiers is None else self.lrm_classifiers[slot]
                state, guess = lrm_refine(state, classifier, self.lrm[slot], self.cfg.lrm_embedding)
                preliminary = guess if preliminary is None else preliminary
        return state, preliminary, self.classifier(state.hidden)

    def slg_forward(self, state, gold_slot_ids, train=True):
        if not train:
            raise CalledAtInference()
        return self.decoder(state.hidden, state.pad_mask, gold_slot_ids, state.slot_mask, self.bos_id, train)

    def forward(self, batch, train=False, with_slg=None):
        if with_slg is None:
            with_slg = train and self.cfg.lambda_ > 0
        state, preliminary, final = self.encode(batch, train)
        slg_logits = self.slg_forward(state, batch.slot_ids, train) if with_slg else None
        return ModelOutput(state, preliminary, final, slg_logits)

    @torch.no_grad()
    def predict(self, batch, use_lrm=True):
        _, _, final = self.encode(batch, train=False, use_lrm=use_lrm)
        return final


def init_model(model):
    numerics.init_parameters(model)
    for tables in model.lrm:
        tables.reset_parameters()


def build_model(cfg, vocab):
    cfg = cfg.with_vocab(vocab)
    model = LrTransformer(cfg, bos_id=vocab.bos_id)
    logger.info(
        "model: %d parameters, %d+%d layers, LRM after %s",
        sum(p.numel() for p in model.parameters()), cfg.n_enc_layers, cfg.n_dec_layers, list(cfg.lrm_layers) or "none",
    )
    return model


# --- checkpoints ---

def save_checkpoint(model, vocab, out_dir, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / VOCAB_JSON)
    manifest = numerics.save_tensors(out_dir / CHECKPOINT_BIN, model.state_dict().items())
    sidecar = {
        "config": model.cfg.to_dict(),
        "vocab_sha256": vocab.digest(),
        "tensors": manifest,
        "extra": extra or {},
    }
    (out_dir / CHECKPOINT_JSON).write_text(json.dumps(sidecar, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(model_dir, vocab=None):
    """Load (model, vocab, sidecar); refuses a vocabulary whose hash differs from the checkpoint's."""
    model_dir = Path(model_dir)
    sidecar = json.loads((model_dir / CHECKPOINT_JSON).read_text(encoding="utf-8"))
    if vocab is None:
        vocab = Vocabulary.load(model_dir / VOCAB_JSON)
    if vocab.digest() != sidecar["vocab_sha256"]:
        raise VocabMismatch(sidecar["vocab_sha256"], vocab.digest())

    cfg = model_config_from_dict(sidecar["config"])
    model = LrTransformer(cfg, bos_id=vocab.bos_id)
    tensors = numerics.load_tensors(model_dir / CHECKPOINT_BIN, sidecar["tensors"])
    model.load_state_dict(tensors)
    model.eval()
    return model, vocab, sidecar


def predictions_to_examples(prediction, batch, vocab, source):
    """Turn argmax labels back into Example rows with the source tokens."""
    intents = prediction.intent_argmax.tolist()
    slots = prediction.slot_argmax.tolist()
    rows = []
    for b, example in enumerate(source):
        n = int(batch.lengths[b])
        tags = tuple(vocab.slot_label(c) for c in slots[b][:n])
        rows.append(Example(example.tokens, tags, vocab.intents[intents[b]]))
    return rows


def predict_examples(model, examples, vocab, batch_size=64, max_len=None, use_lrm=True):
    """Predict a whole split in file order."""
    max_len = max_len or max(len(e.tokens) for e in examples)
    loader = make_loader(examples, vocab, batch_size, max_len, shuffle=False)
    predicted = []
    start = 0
    for batch in loader:
        source = examples[start : start + batch.size]
        predicted += predictions_to_examples(model.predict(batch, use_lrm=use_lrm), batch, vocab, source)
        start += batch.size
    return predicted
