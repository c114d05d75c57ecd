"""Tensor helpers on top of torch: masked softmax, masked cross-entropy, dropout,
parameter stores, finite-difference gradient checking, Adam and the raw f32 checkpoint blob.

Set LRT_DEBUG=1 to check every op output for NaN/Inf.
"""

import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from errors import AllMasked, GradMismatch, MissingGrad, NonFiniteValue, ShapeMismatch

logger = logging.getLogger(__name__)

DEBUG = os.environ.get("LRT_DEBUG", "") == "1"
IGNORE_INDEX = -100


def check_finite(tensor, op):
    if DEBUG and not torch.isfinite(tensor).all():
        raise NonFiniteValue(op)
    return tensor


def set_seed(seed):
    """Single global seed for init, dropout and anything else drawing from torch."""
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


# --- core ops not covered one-to-one by torch ---

def masked_softmax(scores, mask, dim=-1):
    """Softmax over `dim` with mask True = keep. Masked entries are exactly 0."""
    if mask.dtype != torch.bool:
        raise ShapeMismatch(f"mask must be boolean, got {mask.dtype}")
    try:
        mask = mask.expand_as(scores)
    except RuntimeError as exc:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} vs scores {tuple(scores.shape)}") from exc
    empty = ~mask.any(dim=dim)
    if empty.any():
        raise AllMasked(tuple(empty.nonzero()[0].tolist()))
    probs = torch.softmax(scores.masked_fill(~mask, float("-inf")), dim=dim)
    return check_finite(probs.masked_fill(~mask, 0.0), "masked_softmax")


def cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """Per-position negative log-likelihood over the last axis; 0 where target == ignore_index."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    nll = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=ignore_index, reduction="none"
    )
    return check_finite(nll.view(targets.shape), "cross_entropy")


def soft_cross_entropy(log_probs, target_probs, mask=None):
    """H(target, pred) per position; target is treated as a constant."""
    ce = -(target_probs.detach() * log_probs).sum(-1)
    if mask is not None:
        ce = ce.masked_fill(~mask, 0.0)
    return ce


def dropout(x, p, train):
    # inverted scaling: identity at eval time
    return F.dropout(x, p=p, training=train) if p > 0 else x


def stop_gradient(x):
    return x.detach()


def concat(tensors, dim=-1):
    return torch.cat(tensors, dim=dim)


# --- parameters ---

class ParamStore:
    """Ordered name -> trainable tensor map."""

    def __init__(self, named):
        self._params = OrderedDict()
        for name, tensor in named:
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name}")
            if not tensor.requires_grad:
                raise ValueError(f"parameter {name} does not require grad")
            self._params[name] = tensor

    @classmethod
    def from_module(cls, module, skip_prefixes=()):
        return cls(
            (name, p)
            for name, p in module.named_parameters()
            if p.requires_grad and not name.startswith(tuple(skip_prefixes))
        )

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def numel(self):
        return sum(p.numel() for p in self._params.values())


def init_parameters(module):
    """Glorot-uniform weight matrices, zero biases, N(0, d^-0.5) embeddings."""
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            nn.init.xavier_uniform_(sub.weight)
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
        elif isinstance(sub, nn.Embedding):
            nn.init.normal_(sub.weight, mean=0.0, std=sub.embedding_dim ** -0.5)
        elif isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)


# --- gradient checking ---

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(f, params, eps=1e-3, tol=1e-3, max_entries=None, seed=0, skip_nonsmooth=True):
    """Compare autograd gradients of scalar `f()` against central finite differences.

    Relative error is |a - n| / max(1, |a|, |n|). With skip_nonsmooth, an entry whose
    one-sided differences disagree by more than the observed error sits on a kink
    (e.g. a ReLU crossing) and is counted as skipped instead of failing.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")

    params.zero_grad()
    loss = f()
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for name, p in params.items()
    }
    params.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    with torch.no_grad():
        base = float(f())
        for name, p in params.items():
            flat = p.detach().view(-1)
            grads = analytic[name].view(-1)
            indices = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                indices = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))

            worst = 0.0
            for i in indices.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(f())
                flat[i] = orig - eps
                f_minus = float(f())
                flat[i] = orig

                numeric = (f_plus - f_minus) / (2 * eps)
                a = grads[i].item()
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                if err > tol:
                    one_sided_gap = abs((f_plus - base) - (base - f_minus)) / eps
                    if skip_nonsmooth and one_sided_gap >= abs(a - numeric):
                        report.skipped += 1
                        continue
                    index = np.unravel_index(i, tuple(p.shape))
                    raise GradMismatch(name, tuple(int(j) for j in index), a, numeric)
                worst = max(worst, err)
                report.checked += 1
            report.max_rel_error[name] = worst

    logger.debug("grad_check: %d entries checked, %d skipped, worst %.3g", report.checked, report.skipped, report.worst)
    return report


# --- optimizer ---

def make_adam(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return torch.optim.Adam(list(params.values()), lr=lr, betas=(beta1, beta2), eps=eps)


def adam_step(params, optimizer):
    """One bias-corrected Adam update; gradients are cleared afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGrad(name)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def adam_steps_taken(optimizer):
    steps = [int(s["step"]) for s in optimizer.state.values() if "step" in s]
    return max(steps, default=0)


# --- checkpoint blob ---

def save_tensors(path, named_tensors):
    """Write little-endian f32 data back to back; returns the (name, shape, offset) manifest."""
    manifest = []
    offset = 0
    with open(path, "wb") as fh:
        for name, tensor in named_tensors:
            data = tensor.detach().cpu().contiguous().numpy().astype("<f4", copy=False)
            fh.write(data.tobytes(order="C"))
            manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.nbytes
    return manifest


def load_tensors(path, manifest):
    blob = Path(path).read_bytes()
    tensors = OrderedDict()
    for entry in manifest:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(np.float32).reshape(entry["shape"]))
    return tensors
