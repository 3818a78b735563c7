"""Word error rate and the sentence-level QE evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

F1_THRESHOLD = 0.14
NDCG_DEFINITION = "rank=ascending predicted WER (stable); rel=1-min(WER,1); gain=2^rel-1; discount=1/log2(rank+1)"


def edit_distance(reference: Sequence, hypothesis: Sequence) -> int:
    """Levenshtein distance with unit substitution/deletion/insertion costs."""
    hypothesis = list(hypothesis)
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, start=1):
        cur = [i]
        left = i
        for j, h in enumerate(hypothesis):
            best = prev[j] + (r != h)
            up = prev[j + 1] + 1
            if up < best:
                best = up
            if left + 1 < best:
                best = left + 1
            cur.append(best)
            left = best
        prev = cur
    return prev[-1]


def word_error_rate(reference: Sequence, hypothesis: Sequence) -> float:
    if len(reference) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def _pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    return p, y


def mae(predictions, labels, scale_percent: bool = False) -> float:
    p, y = _pair(predictions, labels)
    if p.size == 0:
        raise ValueError("mae needs at least one value")
    value = float(np.mean(np.abs(p - y)))
    return 100.0 * value if scale_percent else value


def pearson(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    if p.size < 2:
        raise ValueError("pearson needs at least two values")
    pc = p - p.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(pc @ pc) * float(yc @ yc))
    if denom == 0.0:
        raise ValueError("undefined correlation: constant input")
    return float(np.clip((pc @ yc) / denom, -1.0, 1.0))


def ndcg(predicted, true_wer, k: int | None = None) -> float:
    """NDCG@k of the ordering induced by predicted WER (lower ranks first).

    Relevance of an item is ``1 - min(true WER, 1)``.  Ties in the prediction
    keep input order.  A list whose relevances are all zero scores 1.
    """
    p, y = _pair(predicted, true_wer)
    n = p.size
    k = n if k is None else k
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rel = 1.0 - np.minimum(y, 1.0)
    gains = np.exp2(rel) - 1.0
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    order = np.argsort(p, kind="stable")[:k]
    ideal = np.sort(gains)[::-1][:k]
    idcg = float(ideal @ discount)
    if idcg == 0.0:
        return 1.0
    return float(gains[order] @ discount) / idcg


def f1_at_threshold(predicted, true_wer, tau: float = F1_THRESHOLD) -> float:
    """F1 of the "acceptable" class (WER <= tau) with both sides thresholded.

    Returns 0 when nothing is correctly flagged acceptable, except that a
    set with no acceptable items on either side scores 1.
    """
    p, y = _pair(predicted, true_wer)
    pred_pos = p <= tau
    true_pos = y <= tau
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    if tp + fp + fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    mae: float
    pearson: float
    ndcg: float
    f1: float
    count: int
    mae_scaled: bool = True

    def to_text(self) -> str:
        lines = [f"# ndcg: {NDCG_DEFINITION}", f"# f1: acceptable iff WER <= {F1_THRESHOLD}"]
        lines += [f"{k}={v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    def to_record(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        fields = {}
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key] = value
        return cls(
            mae=float(fields["mae"]),
            pearson=float(fields["pearson"]),
            ndcg=float(fields["ndcg"]),
            f1=float(fields["f1"]),
            count=int(fields["count"]),
            mae_scaled=fields.get("mae_scaled", "True") == "True",
        )


def evaluate(predictions, labels, scale_percent: bool = True, tau: float = F1_THRESHOLD) -> EvalReport:
    p, y = _pair(predictions, labels)
    return EvalReport(
        mae=mae(p, y, scale_percent),
        pearson=pearson(p, y),
        ndcg=ndcg(p, y),
        f1=f1_at_threshold(p, y, tau),
        count=int(p.size),
        mae_scaled=scale_percent,
    )


def length_bucket_pearson(predictions, labels, lengths, n_buckets: int = 10) -> list[dict]:
    """Pearson per token-length quantile bucket (buckets with < 2 points or
    constant values report ``None``)."""
    p, y = _pair(predictions, labels)
    lengths = np.asarray(lengths)
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    edges = np.unique(np.quantile(lengths, np.linspace(0, 1, n_buckets + 1)))
    if edges.size == 1:
        edges = np.repeat(edges, 2)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        last = hi == edges[-1]
        sel = (lengths >= lo) & ((lengths <= hi) if last else (lengths < hi))
        try:
            r = pearson(p[sel], y[sel])
        except ValueError:
            r = None
        out.append({"min_len": float(lo), "max_len": float(hi), "count": int(sel.sum()), "pearson": r})
    return out
