"""Pre-training loop for :class:`~ziqe.speech_bert.SpeechBert`."""

from __future__ import annotations

import math
from collections import Counter
from typing import Callable, Sequence

import numpy as np

from .data import Utterance
from .nn.params import Adam
from .speech_bert import SpeechBert, apply_masking


def masking_seed(seed: int, epoch: int, index: int) -> int:
    """Seed of the masking stream for utterance ``index`` in ``epoch``."""
    return (seed << 40) ^ (epoch << 24) ^ index


def _mask(model: SpeechBert, utt: Utterance, rng_seed: int):
    c = model.config
    return apply_masking(utt.tokens, rng_seed, c.vocab_size, c.target_prob,
                         c.mask_prob, c.substitute_prob, model.specials)


def pretrain(model: SpeechBert, utterances: Sequence[Utterance], epochs: int = 10,
             batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
             lambda_st: float | None = None,
             log: Callable[[dict], None] | None = None) -> list[dict]:
    """Minimise the joint masked-LM + ASR loss; returns per-epoch mean losses."""
    opt = Adam(model.store, lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(utterances))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            batch = [utterances[j] for j in idx]
            outcomes = [_mask(model, u, masking_seed(seed, epoch, int(j))) for u, j in zip(batch, idx)]
            model.store.zero_grad()
            loss = model.joint_loss([u.features for u in batch], [u.tokens for u in batch], outcomes, lambda_st)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite pre-training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(value)
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        history.append(record)
        if log:
            log(record)
    return history


def masked_token_accuracy(model: SpeechBert, utterances: Sequence[Utterance], seed: int = 12345,
                          batch_size: int = 64) -> tuple[float, float]:
    """Accuracy at masking targets, and the majority-token baseline on the same targets."""
    correct = total = 0
    labels: Counter = Counter()
    for i in range(0, len(utterances), batch_size):
        batch = utterances[i:i + batch_size]
        outcomes = [_mask(model, u, masking_seed(seed, 0, i + k)) for k, u in enumerate(batch)]
        preds = model.predict_masked([u.features for u in batch], outcomes)
        for o, p in zip(outcomes, preds):
            correct += int(np.sum(np.asarray(o.target_labels) == p))
            total += len(o.target_labels)
            labels.update(o.target_labels)
    majority = labels.most_common(1)[0][1] / total
    return correct / total, majority
