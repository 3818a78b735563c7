"""Finite-difference verification of every differentiable building block.

Each check builds a small randomized instance in double precision, compares
reverse-mode gradients against central differences on all of its leaves, and
reports the worst relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import CorpusConfig, CorruptionConfig, generate_corpus
from .nn import (MaskMode, ParamStore, Tensor, bilstm_fuse, dense, embedding_lookup,
                 feed_forward, finite_difference_check, init_attention, init_bilstm,
                 init_dense, init_layer_norm, layer_norm, multi_head_attention)
from .nn import tensor as T
from .qe_head import HeadKind, HeadSpec, QEModel
from .speech_bert import ModelConfig, SpeechBert, apply_masking

GRAD_TOLERANCE = 1e-5


@dataclass
class GradCheckRow:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRAD_TOLERANCE


def _leaves(store: ParamStore, **extra: Tensor) -> dict[str, Tensor]:
    out = {n: store[n] for n in store.names()}
    out.update(extra)
    return out


def _probe(rng: np.random.Generator, shape) -> Tensor:
    # Random projection turns a tensor output into a scalar with dense gradients.
    return Tensor(rng.normal(size=shape))


def _check_elementwise(rng):
    x = Tensor(rng.uniform(0.2, 2.0, size=(3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(4,)), requires_grad=True)

    def fn():
        parts = [T.exp(x * 0.3), T.log(x), T.tanh(y), T.sigmoid(x - y), T.softplus(y * x),
                 T.relu(x - 1.1), T.reciprocal(x), T.square(y) / x]
        return sum((T.tsum(p * (k + 1.0)) for k, p in enumerate(parts)), Tensor(np.zeros(())))

    return fn, {"x": x, "y": y}


def _check_reductions(rng):
    x = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    p1, p2 = _probe(rng, (2, 4, 3)), _probe(rng, (4, 2, 5))

    def fn():
        a = T.transpose(x @ w, (0, 2, 1))
        b = T.stack([x[:, :2, :], x[:, 1:, :]], axis=0)
        c = T.concat([T.mean(x, axis=1, keepdims=True), x[:, ::2, :]], axis=1)
        return T.tsum(a * p1) + T.tsum(b.reshape(4, 2, 5) * p2) + T.tsum(c * c)

    return fn, {"x": x, "w": w}


def _check_softmax_family(rng):
    z = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    targets = rng.integers(0, 6, size=4)
    weights = rng.uniform(0.5, 1.5, size=4)
    probe = _probe(rng, (4, 6))

    def fn():
        return (T.tsum(T.softmax(z) * probe) + T.tsum(T.log_softmax(z) * probe * 0.5)
                + T.cross_entropy(z, targets, weights))

    return fn, {"z": z}


def _check_dense_norm(rng):
    store = ParamStore(np.float64)
    init_dense(store, "d", 5, 7, rng)
    init_layer_norm(store, "ln", 7)
    store["ln/gamma"].data[:] = rng.uniform(0.5, 1.5, 7)
    store["ln/beta"].data[:] = rng.normal(size=7)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    probe = _probe(rng, (3, 7))
    return (lambda: T.tsum(layer_norm(dense(x, store, "d"), store, "ln") * probe)), _leaves(store, x=x)


def _check_embedding(rng):
    store = ParamStore(np.float64)
    store.add("emb", rng.normal(size=(9, 4)))
    ids = rng.integers(0, 9, size=(2, 6))
    probe = _probe(rng, (2, 6, 4))
    return (lambda: T.tsum(embedding_lookup(ids, store, "emb") * probe)), _leaves(store)


def _check_feed_forward(rng):
    store = ParamStore(np.float64)
    init_dense(store, "ff/in", 4, 8, rng)
    init_dense(store, "ff/out", 8, 4, rng)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    probe = _probe(rng, (2, 3, 4))
    return (lambda: T.tsum(feed_forward(x, store, "ff") * probe)), _leaves(store, x=x)


def _attention_check(mode: MaskMode, cross: bool):
    def build(rng):
        store = ParamStore(np.float64)
        init_attention(store, "att", 8, rng)
        q = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
        kv_len = 7 if cross else 5
        kv = Tensor(rng.normal(size=(2, kv_len, 8)), requires_grad=True) if cross else q
        valid = np.ones((2, kv_len), dtype=bool)
        valid[1, -2:] = False
        probe = _probe(rng, (2, 5, 8))

        def fn():
            return T.tsum(multi_head_attention(q, kv, kv, store, "att", 2, mode, valid) * probe)

        leaves = _leaves(store, q=q)
        if cross:
            leaves["kv"] = kv
        return fn, leaves

    return build


def _bilstm_check(tied: bool):
    def build(rng):
        store = ParamStore(np.float64)
        init_bilstm(store, "lstm", 4, 3, rng, tied=tied)
        x = Tensor(rng.normal(size=(3, 6, 4)), requires_grad=True)
        lengths = [6, 4, 1]
        probe = _probe(rng, (3, 6))
        return (lambda: T.tsum(bilstm_fuse(x, store, "lstm", lengths) * probe)), _leaves(store, x=x)

    return build


def _tiny_backbone(seed: int) -> tuple[SpeechBert, list]:
    corpus = CorpusConfig(n_utterances=8, vocab_size=12, min_len=3, max_len=5, raw_dim=3,
                          frames_per_token=2, stack_window=2, root_seed=seed,
                          corruption=CorruptionConfig(p_clean=0.4, seed=seed))
    samples = generate_corpus(corpus)
    cfg = ModelConfig(vocab_size=12, feature_dim=6, d_model=8, heads=2, encoder_layers=1,
                      memory_layers=1, feedforward_dim=12, max_seq_len=32)
    return SpeechBert(cfg, seed=seed, dtype=np.float64), samples


def _check_pretrain_loss(rng):
    model, samples = _tiny_backbone(int(rng.integers(1 << 30)))
    utts = [s.utterance for s in samples[:3]]
    outcomes = [apply_masking(u.tokens, 11 + k, model.config.vocab_size) for k, u in enumerate(utts)]
    feats = [u.features for u in utts]
    tokens = [u.tokens for u in utts]
    return (lambda: model.joint_loss(feats, tokens, outcomes)), _leaves(model.store)


def _qe_check(kind: HeadKind):
    def build(rng):
        model, samples = _tiny_backbone(int(rng.integers(1 << 30)))
        head = HeadSpec(kind, support=(0.0, 0.25)) if kind is HeadKind.INFLATED_CATEGORICAL else kind
        qe = QEModel(model, head, fuser_hidden=3, phi=4.0, seed=1)
        labels = [s.wer_label for s in samples]
        if not (0.0 in labels and any(v > 0 for v in labels)):
            raise RuntimeError("check corpus needs both zero and positive labels")
        return (lambda: qe.loss(samples)), _leaves(qe.store)

    return build


CHECKS: dict[str, Callable] = {
    "elementwise ops": _check_elementwise,
    "matmul/shape/reduction ops": _check_reductions,
    "softmax/log_softmax/cross_entropy": _check_softmax_family,
    "dense + layer_norm": _check_dense_norm,
    "embedding": _check_embedding,
    "feed_forward": _check_feed_forward,
    "self-attention (full)": _attention_check(MaskMode.FULL, cross=False),
    "self-attention (causal)": _attention_check(MaskMode.CAUSAL, cross=False),
    "cross-attention (padded memory)": _attention_check(MaskMode.FULL, cross=True),
    "bilstm_fuse": _bilstm_check(tied=False),
    "bilstm_fuse (tied)": _bilstm_check(tied=True),
    "speech-bert joint loss": _check_pretrain_loss,
    **{f"qe loss: {k.value}": _qe_check(k) for k in HeadKind},
}


def gradient_checks(seed: int = 0, max_coords: int = 32, floor: float = 1e-4) -> list[GradCheckRow]:
    """Run every entry of :data:`CHECKS`; each gets its own seeded generator.

    ``floor`` bounds the relative-error denominator.  Several gradients are
    exactly zero (attention key biases cancel in the softmax), and there only
    the central difference's rounding noise (~1e-10) remains.
    """
    rows = []
    for k, (name, build) in enumerate(CHECKS.items()):
        fn, leaves = build(np.random.default_rng([seed, k]))
        err = finite_difference_check(fn, leaves, max_coords=max_coords, seed=seed, floor=floor)
        rows.append(GradCheckRow(name, err))
    return rows


def format_table(rows: list[GradCheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'max rel err':>11}  result"]
    lines += [f"{r.name:<{width}}  {r.max_rel_error:11.3e}  {'pass' if r.passed else 'FAIL'}" for r in rows]
    return "\n".join(lines)
