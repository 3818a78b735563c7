"""Transformer and recurrent building blocks over a :class:`ParamStore`.

Each layer reads its weights from the store by ``prefix`` so the same
function can run with shared (tied) or separate parameters.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import NEG_INF, Tensor


class MaskMode(enum.Enum):
    """Self-attention mask: ``CAUSAL`` adds the future-blocking matrix, ``FULL`` adds nothing."""

    CAUSAL = "causal"
    FULL = "full"


# -- initialisers ----------------------------------------------------------------
def init_dense(store: ParamStore, prefix: str, d_in: int, d_out: int,
               rng: np.random.Generator, scale: float | None = None) -> None:
    scale = math.sqrt(1.0 / d_in) if scale is None else scale
    store.add(f"{prefix}/w", rng.normal(0.0, scale, size=(d_in, d_out)))
    store.add(f"{prefix}/b", np.zeros(d_out))


def init_layer_norm(store: ParamStore, prefix: str, d: int) -> None:
    store.add(f"{prefix}/gamma", np.ones(d))
    store.add(f"{prefix}/beta", np.zeros(d))


def init_attention(store: ParamStore, prefix: str, d: int, rng: np.random.Generator) -> None:
    for proj in ("q", "k", "v", "o"):
        init_dense(store, f"{prefix}/{proj}", d, d, rng)


def init_bilstm(store: ParamStore, prefix: str, d_in: int, hidden: int,
                rng: np.random.Generator, tied: bool = False) -> None:
    directions = ("fw",) if tied else ("fw", "bw")
    for direction in directions:
        p = f"{prefix}/{direction}"
        store.add(f"{p}/wx", rng.normal(0.0, math.sqrt(1.0 / d_in), size=(d_in, 4 * hidden)))
        store.add(f"{p}/wh", rng.normal(0.0, math.sqrt(1.0 / hidden), size=(hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate starts open
        store.add(f"{p}/b", b)


# -- layers ------------------------------------------------------------------------
def dense(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    w = store[f"{prefix}/w"]
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"{prefix}: input dim {x.shape[-1]} does not match weight {w.shape}")
    return x @ w + store[f"{prefix}/b"]


def layer_norm(x: Tensor, store: ParamStore, prefix: str, eps: float = 1e-5) -> Tensor:
    gamma = store[f"{prefix}/gamma"]
    if x.shape[-1] != gamma.shape[0]:
        raise ValueError(f"{prefix}: input dim {x.shape[-1]} does not match {gamma.shape[0]}")
    return T.layer_norm(x, gamma, store[f"{prefix}/beta"], eps)


def embedding_lookup(ids, store: ParamStore, name: str) -> Tensor:
    ids = np.asarray(ids)
    table = store[name]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"{name}: token id out of range [0, {table.shape[0]})")
    return T.embedding(table, ids)


def positional_encoding(length: int, d: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encoding: even columns ``sin``, odd columns ``cos``."""
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(dtype)


def attention_bias(mode: MaskMode, q_len: int, k_len: int,
                   key_valid: np.ndarray | None, dtype) -> np.ndarray | None:
    """Additive pre-softmax bias, broadcastable to ``(B, heads, q_len, k_len)``."""
    bias = None
    if mode is MaskMode.CAUSAL:
        if q_len != k_len:
            raise ValueError("causal attention needs queries and keys from one sequence")
        bias = np.triu(np.full((q_len, k_len), NEG_INF, dtype=dtype), k=1)
    if key_valid is not None:
        pad = np.where(np.asarray(key_valid, dtype=bool), 0.0, NEG_INF).astype(dtype)
        pad = pad[:, None, None, :]
        bias = pad if bias is None else bias + pad
    return bias


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, store: ParamStore,
                         prefix: str, heads: int, mode: MaskMode = MaskMode.FULL,
                         key_valid: np.ndarray | None = None, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` heads.

    Inputs are ``(batch, seq, d)``.  Scores are divided by ``sqrt(d / heads)``
    and, in ``CAUSAL`` mode, query ``i`` cannot see keys ``j > i``.
    ``key_valid`` (``(batch, k_len)`` booleans) hides padded keys.

    Returns the ``(batch, q_len, d)`` output, plus the ``(batch, heads,
    q_len, k_len)`` weights when ``return_weights`` is set.
    """
    if q_in.ndim != 3 or k_in.ndim != 3 or v_in.ndim != 3:
        raise ValueError("attention inputs must be (batch, seq, d)")
    b, tq, d = q_in.shape
    tk = k_in.shape[1]
    if k_in.shape[0] != b or v_in.shape[:2] != k_in.shape[:2]:
        raise ValueError(f"{prefix}: key/value shapes {k_in.shape}, {v_in.shape} do not match")
    if k_in.shape[2] != d or v_in.shape[2] != d:
        raise ValueError(f"{prefix}: model dims differ between query and key/value")
    if heads < 1 or d % heads:
        raise ValueError(f"{prefix}: {heads} heads do not divide d={d}")
    dk = d // heads

    def split(x: Tensor, n: int) -> Tensor:
        return x.reshape(b, n, heads, dk).transpose(0, 2, 1, 3)

    q = split(dense(q_in, store, f"{prefix}/q"), tq)
    k = split(dense(k_in, store, f"{prefix}/k"), tk)
    v = split(dense(v_in, store, f"{prefix}/v"), tk)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d / heads))
    bias = attention_bias(mode, tq, tk, key_valid, scores.dtype)
    if bias is not None:
        scores = scores + Tensor(bias)
    weights = T.softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
    out = dense(ctx, store, f"{prefix}/o")
    if return_weights:
        return out, weights.data
    return out


def feed_forward(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return dense(T.relu(dense(x, store, f"{prefix}/in")), store, f"{prefix}/out")


def bilstm_fuse(x: Tensor, store: ParamStore, prefix: str, lengths=None) -> Tensor:
    """Encode a feature sequence into one vector with a bidirectional LSTM.

    ``x`` is ``(seq, d)`` or ``(batch, seq, d)``.  The result concatenates
    the forward direction's state after the last valid step with the
    backward direction's state after reaching the first step, giving
    ``2 * hidden`` features per sequence.  When no ``bw`` weights exist
    under ``prefix`` the backward direction reuses the forward ones.
    """
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    batch, seq, _ = x.shape
    if seq < 1:
        raise ValueError("bilstm_fuse needs a non-empty sequence")
    if lengths is None:
        lengths = np.full(batch, seq)
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ValueError("bilstm_fuse needs a non-empty sequence")
    valid = np.arange(seq)[None, :] < lengths[:, None]

    fw = f"{prefix}/fw"
    bw = f"{prefix}/bw" if f"{prefix}/bw/wx" in store else fw
    xw_f = x @ store[f"{fw}/wx"] + store[f"{fw}/b"]
    xw_b = xw_f if bw == fw else x @ store[f"{bw}/wx"] + store[f"{bw}/b"]
    h_f = T.lstm_scan(xw_f, store[f"{fw}/wh"], valid)
    h_b = T.lstm_scan(xw_b, store[f"{bw}/wh"], valid, reverse=True)
    out = T.concat([h_f, h_b], axis=-1)
    return out.reshape(-1) if single else out
