"""Conditional masked language model over (speech features, tokens).

A speech encoder turns stacked feature frames into a memory.  A text stack
with self-attention, cross-attention into the memory and a feed-forward block
then runs either

* with ``MaskMode.FULL`` self-attention: the bidirectional memory encoder
  trained by masked-token prediction, or
* with ``MaskMode.CAUSAL`` self-attention: the autoregressive ASR decoder.

Both paths read exactly the same parameters; only the attention mask differs.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import tensor as T
from .nn.layers import (
    MaskMode,
    dense,
    embedding_lookup,
    feed_forward,
    init_attention,
    init_dense,
    init_layer_norm,
    layer_norm,
    multi_head_attention,
    positional_encoding,
)
from .nn.params import ParamStore
from .nn.tensor import Tensor
from .rng import SplitMix64
from .tokens import SPECIALS, SpecialTokens

MASKED, SUBSTITUTED, UNCHANGED = "masked", "substituted", "unchanged"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 50
    feature_dim: int = 64
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    memory_layers: int = 2
    feedforward_dim: int = 128
    max_seq_len: int = 256
    lambda_st: float = 0.15
    target_prob: float = 0.15
    mask_prob: float = 0.8
    substitute_prob: float = 0.1

    def __post_init__(self):
        counts = ("vocab_size", "feature_dim", "d_model", "heads", "encoder_layers",
                  "memory_layers", "feedforward_dim", "max_seq_len")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not (math.isfinite(self.lambda_st) and self.lambda_st >= 0):
            raise ValueError("lambda_st must be finite and non-negative")
        if self.mask_prob + self.substitute_prob > 1.0:
            raise ValueError("mask_prob + substitute_prob must not exceed 1")
        SPECIALS.validate(self.vocab_size)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class MaskingOutcome:
    original: list[int]
    corrupted_tokens: list[int]
    target_positions: list[int]
    target_labels: list[int]
    outcome_kind: list[str]


def apply_masking(tokens: Sequence[int], rng_seed: int, vocab_size: int,
                  target_prob: float = 0.15, mask_prob: float = 0.8,
                  substitute_prob: float = 0.1,
                  specials: SpecialTokens = SPECIALS) -> MaskingOutcome:
    """Select prediction targets BERT-style.

    Each position becomes a target independently with ``target_prob``.  A
    target is replaced by ``[mask]`` with ``mask_prob``, by a uniformly drawn
    content token with ``substitute_prob``, and left alone otherwise
    (0.15 x 0.8/0.1/0.1 gives 12% / 1.5% / 1.5% of all tokens).  If no
    position is selected the draw is repeated from the same stream, so every
    outcome has at least one target.  Randomness comes from
    :class:`~ziqe.rng.SplitMix64` seeded with ``rng_seed``.
    """
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot mask an empty sequence")
    if any(specials.is_special(t) for t in tokens):
        raise ValueError("input contains special tokens")
    rng = SplitMix64(rng_seed)
    while True:
        selected = rng.uniform(n) < target_prob
        kind_u = rng.uniform(n)
        subs = rng.integers(specials.first_content_id, vocab_size, n)
        if selected.any():
            break
    corrupted = list(tokens)
    positions, labels, kinds = [], [], []
    for i in np.flatnonzero(selected):
        positions.append(int(i))
        labels.append(tokens[i])
        if kind_u[i] < mask_prob:
            corrupted[i] = specials.mask_id
            kinds.append(MASKED)
        elif kind_u[i] < mask_prob + substitute_prob:
            corrupted[i] = int(subs[i])
            kinds.append(SUBSTITUTED)
        else:
            kinds.append(UNCHANGED)
    return MaskingOutcome(tokens, corrupted, positions, labels, kinds)


def pad_tokens(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    if np.any(lengths < 1):
        raise ValueError("empty token sequence in batch")
    ids = np.full((len(seqs), lengths.max()), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, np.arange(ids.shape[1])[None, :] < lengths[:, None]


def pad_features(feats: Sequence[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats])
    if np.any(lengths < 1):
        raise ValueError("empty feature matrix in batch")
    out = np.zeros((len(feats), lengths.max(), feats[0].shape[1]), dtype=dtype)
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out, np.arange(out.shape[1])[None, :] < lengths[:, None]


def _as_arrays(features) -> list[np.ndarray]:
    return [getattr(f, "data", f) for f in features]


class SpeechBert:
    """Speech encoder plus the mask-switchable text stack.

    Parameter names: ``speech/...`` for the speech encoder, ``text/...`` for
    the shared memory-encoder/decoder stack.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 specials: SpecialTokens = SPECIALS, store: ParamStore | None = None):
        self.config = config
        self.specials = specials
        if store is None:
            store = ParamStore(dtype)
            self._init_params(store, np.random.default_rng(seed))
        self.store = store

    @property
    def dtype(self):
        return self.store.dtype

    def _init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        c = self.config
        init_dense(store, "speech/in", c.feature_dim, c.d_model, rng)
        for i in range(c.encoder_layers):
            p = f"speech/layer{i}"
            init_attention(store, f"{p}/att", c.d_model, rng)
            init_layer_norm(store, f"{p}/ln1", c.d_model)
            init_dense(store, f"{p}/ffn/in", c.d_model, c.feedforward_dim, rng)
            init_dense(store, f"{p}/ffn/out", c.feedforward_dim, c.d_model, rng)
            init_layer_norm(store, f"{p}/ln2", c.d_model)
        store.add("text/embed", rng.normal(0.0, 1.0, size=(c.vocab_size, c.d_model)))
        for i in range(c.memory_layers):
            p = f"text/layer{i}"
            init_attention(store, f"{p}/self", c.d_model, rng)
            init_layer_norm(store, f"{p}/ln1", c.d_model)
            init_attention(store, f"{p}/cross", c.d_model, rng)
            init_layer_norm(store, f"{p}/ln2", c.d_model)
            init_dense(store, f"{p}/ffn/in", c.d_model, c.feedforward_dim, rng)
            init_dense(store, f"{p}/ffn/out", c.feedforward_dim, c.d_model, rng)
            init_layer_norm(store, f"{p}/ln3", c.d_model)
        init_dense(store, "text/out", c.d_model, c.vocab_size, rng)

    # -- forward pieces ------------------------------------------------------------
    def speech_encode(self, features) -> tuple[Tensor, np.ndarray]:
        """Memory ``(batch, frames, d_model)`` and the frame validity mask."""
        c = self.config
        arrays = _as_arrays(features)
        for f in arrays:
            if f.ndim != 2 or f.shape[1] != c.feature_dim:
                raise ValueError(f"features must be (frames, {c.feature_dim}), got {f.shape}")
        x, valid = pad_features(arrays, self.dtype)
        if x.shape[1] > c.max_seq_len:
            raise ValueError(f"{x.shape[1]} frames exceed max_seq_len={c.max_seq_len}")
        h = dense(Tensor(x), self.store, "speech/in")
        h = h + Tensor(positional_encoding(x.shape[1], c.d_model, self.dtype))
        for i in range(c.encoder_layers):
            p = f"speech/layer{i}"
            a = multi_head_attention(h, h, h, self.store, f"{p}/att", c.heads, MaskMode.FULL, valid)
            h = layer_norm(h + a, self.store, f"{p}/ln1")
            h = layer_norm(h + feed_forward(h, self.store, f"{p}/ffn"), self.store, f"{p}/ln2")
        return h, valid

    def text_encode(self, ids: np.ndarray, valid: np.ndarray, memory: Tensor,
                    frame_valid: np.ndarray, mode: MaskMode, return_attention: bool = False):
        """Final text-stack states ``(batch, tokens, d_model)``.

        With ``return_attention`` also returns, per layer, the cross-attention
        weights ``(batch, heads, tokens, frames)``.
        """
        c = self.config
        if ids.shape[1] > c.max_seq_len:
            raise ValueError(f"{ids.shape[1]} tokens exceed max_seq_len={c.max_seq_len}")
        h = embedding_lookup(ids, self.store, "text/embed")
        h = h + Tensor(positional_encoding(ids.shape[1], c.d_model, self.dtype))
        attn = []
        for i in range(c.memory_layers):
            p = f"text/layer{i}"
            a = multi_head_attention(h, h, h, self.store, f"{p}/self", c.heads, mode, valid)
            h = layer_norm(h + a, self.store, f"{p}/ln1")
            x = multi_head_attention(h, memory, memory, self.store, f"{p}/cross", c.heads,
                                     MaskMode.FULL, frame_valid, return_weights=return_attention)
            if return_attention:
                x, w = x
                attn.append(w)
            h = layer_norm(h + x, self.store, f"{p}/ln2")
            h = layer_norm(h + feed_forward(h, self.store, f"{p}/ffn"), self.store, f"{p}/ln3")
        return (h, attn) if return_attention else h

    def logits(self, states: Tensor) -> Tensor:
        return dense(states, self.store, "text/out")

    def _wrap(self, tokens: Sequence[int]) -> list[int]:
        return [self.specials.bos_id, *tokens, self.specials.eos_id]

    # -- losses --------------------------------------------------------------------
    def masked_lm_loss(self, features, outcomes: Sequence[MaskingOutcome], memory=None) -> Tensor:
        """Mean NLL of the original tokens at the masking targets (full attention)."""
        if any(len(o.target_positions) == 0 for o in outcomes):
            raise ValueError("masking outcome without targets")
        if memory is None:
            memory = self.speech_encode(features)
        mem, frame_valid = memory
        ids, valid = pad_tokens([self._wrap(o.corrupted_tokens) for o in outcomes], self.specials.pad_id)
        targets = np.zeros_like(ids)
        weights = np.zeros(ids.shape)
        for b, o in enumerate(outcomes):
            pos = np.asarray(o.target_positions) + 1  # shift past [bos]
            targets[b, pos] = o.target_labels
            weights[b, pos] = 1.0
        states = self.text_encode(ids, valid, mem, frame_valid, MaskMode.FULL)
        return T.cross_entropy(self.logits(states), targets, weights)

    def asr_loss(self, features, tokens: Sequence[Sequence[int]], memory=None,
                 per_step: bool = False):
        """Teacher-forced mean NLL of ``tokens + [eos]`` given ``[bos] + tokens``.

        ``per_step`` additionally returns the ``(batch, steps)`` NLL matrix.
        """
        if memory is None:
            memory = self.speech_encode(features)
        mem, frame_valid = memory
        sp = self.specials
        ids, valid = pad_tokens([[sp.bos_id, *t] for t in tokens], sp.pad_id)
        targets, _ = pad_tokens([[*t, sp.eos_id] for t in tokens], sp.pad_id)
        states = self.text_encode(ids, valid, mem, frame_valid, MaskMode.CAUSAL)
        logits = self.logits(states)
        loss = T.cross_entropy(logits, targets, valid)
        if not per_step:
            return loss
        logp = T.log_softmax(Tensor(logits.data), axis=-1).data
        nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        return loss, np.where(valid, nll, 0.0)

    def joint_loss(self, features, tokens: Sequence[Sequence[int]],
                   outcomes: Sequence[MaskingOutcome], lambda_st: float | None = None) -> Tensor:
        """``L_SB + lambda_st * L_ST`` sharing one speech-encoder pass."""
        lam = self.config.lambda_st if lambda_st is None else lambda_st
        memory = self.speech_encode(features)
        loss = self.masked_lm_loss(features, outcomes, memory)
        if lam != 0.0:
            loss = loss + self.asr_loss(features, tokens, memory) * lam
        return loss

    # -- inference -----------------------------------------------------------------
    def encode_batch(self, features, token_seqs: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        """Full-attention text states for a batch plus the token validity mask."""
        mem, frame_valid = self.speech_encode(features)
        ids, valid = pad_tokens(token_seqs, self.specials.pad_id)
        return self.text_encode(ids, valid, mem, frame_valid, MaskMode.FULL), valid

    def extract_features(self, features, tokens: Sequence[int]) -> np.ndarray:
        """One final-layer state per token, ``(len(tokens), d_model)``."""
        states, _ = self.encode_batch([features], [list(tokens)])
        return states.data[0].copy()

    def dump_attention(self, features, tokens: Sequence[int]) -> list[np.ndarray]:
        """Per text layer, the head-averaged cross-attention ``(tokens, frames)``."""
        mem, frame_valid = self.speech_encode([features])
        ids, valid = pad_tokens([list(tokens)], self.specials.pad_id)
        _, attn = self.text_encode(ids, valid, mem, frame_valid, MaskMode.FULL, return_attention=True)
        return [w[0].mean(axis=0) for w in attn]

    def predict_masked(self, features, outcomes: Sequence[MaskingOutcome]) -> list[np.ndarray]:
        """Arg-max predictions at each outcome's target positions."""
        mem, frame_valid = self.speech_encode(features)
        ids, valid = pad_tokens([self._wrap(o.corrupted_tokens) for o in outcomes], self.specials.pad_id)
        logits = self.logits(self.text_encode(ids, valid, mem, frame_valid, MaskMode.FULL)).data
        return [logits[b, np.asarray(o.target_positions) + 1].argmax(-1) for b, o in enumerate(outcomes)]
