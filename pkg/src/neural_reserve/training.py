"""Next-token training loop shared by fine-tuning and synthetic pre-training."""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .model.gpt2 import Model, forward

logger = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


def chunk_sequences(sequences, max_length: int) -> list:
    """Split token sequences into non-overlapping chunks of >= 2 tokens."""
    out = []
    for seq in sequences:
        seq = list(seq)
        for i in range(0, len(seq), max_length):
            piece = seq[i:i + max_length]
            if len(piece) >= 2:
                out.append(piece)
    return out


def window_gradients(model: Model, sequences) -> tuple[dict, float]:
    """Gradient of the token-weighted mean NLL over ``sequences``.

    Each sequence runs its own forward/backward; contributions are summed
    in list order so the result does not depend on how a window is split
    into passes. Returns ``(name -> gradient, mean NLL)``.
    """
    total_tokens = sum(len(s) - 1 for s in sequences)
    acc = {}
    loss_sum = 0.0
    for seq in sequences:
        weight = (len(seq) - 1) / total_tokens
        with ad.Graph() as g:
            logits = forward(model, seq)
            nll = ad.cross_entropy_next_token(logits[:-1], seq[1:])
            grads = g.backward(ad.mul(nll, weight))
        loss_sum += float(nll.data) * weight
        for name, p in model.params.items():
            gp = grads.get(p)
            if gp is None:
                continue
            if name in acc:
                acc[name] += gp
            else:
                acc[name] = gp.copy()
    for name, gp in acc.items():
        if not np.isfinite(gp).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    return acc, loss_sum


def iterate_windows(n_items: int, accumulation: int, epochs: int, seed: int, shuffle: bool = True):
    """Yield ``(epoch, indices)`` optimizer windows in a seed-determined order."""
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(n_items) if shuffle else np.arange(n_items)
        for start in range(0, n_items, accumulation):
            yield epoch, [int(i) for i in order[start:start + accumulation]]


def train_lm(model: Model, sequences, steps: int, lr: float = 3e-3, batch: int = 8,
             seed: int = 0, weight_decay: float = 0.0, log_every: int = 0) -> list:
    """Train ``model`` in place on random batches of ``sequences``; returns the loss curve."""
    if not sequences:
        raise ValueError("no training sequences")
    for p in model.params.values():
        p.requires_grad = True
    rng = np.random.default_rng(seed)
    state = ad.AdamState()
    hyper = ad.AdamHyper(lr=lr, weight_decay=weight_decay)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(sequences), size=batch)
        grads, loss = window_gradients(model, [sequences[i] for i in idx])
        ad.adamw_step(model.params, grads, state, hyper)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.4f", step + 1, loss)
    for p in model.params.values():
        p.requires_grad = False
    return losses
