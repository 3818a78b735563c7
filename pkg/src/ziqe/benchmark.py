"""Toy end-to-end head comparison on the synthetic corpus.

Protocol: generate the corpus, pre-train a small backbone on every
non-test utterance, then fine-tune one QE model per (head, seed) on top of the
frozen backbone and score held-out Pearson on the test tail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import CorpusConfig, generate_corpus
from .metrics import pearson
from .pretrain import masked_token_accuracy, pretrain
from .qe_head import HeadKind, QEModel, train_qe
from .speech_bert import ModelConfig, SpeechBert


@dataclass(frozen=True)
class BenchmarkConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(feature_dim=64))
    test_size: int = 700
    dev_size: int = 500
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    qe_epochs: int = 25
    qe_lr: float = 3e-3
    patience: int = 5
    fuser_hidden: int = 64
    heads: tuple[str, ...] = ("zi_beta", "zi_linear", "linear")
    seeds: tuple[int, ...] = (0, 1, 2, 3)


@dataclass
class BenchmarkResult:
    masked_accuracy: float
    majority_baseline: float
    pearson: dict[str, list[float]]
    seconds: float

    def mean(self, head: str) -> float:
        return float(np.mean(self.pearson[head]))


def run_head_comparison(cfg: BenchmarkConfig = BenchmarkConfig(),
                        log: Callable[[str], None] | None = None) -> BenchmarkResult:
    start = time.perf_counter()
    say = log or (lambda _msg: None)
    samples = generate_corpus(cfg.corpus)
    n = len(samples)
    cut_test, cut_dev = n - cfg.test_size, n - cfg.test_size - cfg.dev_size
    if cut_dev < 1:
        raise ValueError("corpus too small for the requested dev/test sizes")
    train, dev, test = samples[:cut_dev], samples[cut_dev:cut_test], samples[cut_test:]

    model_cfg = cfg.model
    if model_cfg.vocab_size != cfg.corpus.vocab_size:
        raise ValueError("model and corpus vocabularies differ")
    backbone = SpeechBert(model_cfg, seed=0)
    pretrain(backbone, [s.utterance for s in train + dev], epochs=cfg.pretrain_epochs,
             lr=cfg.pretrain_lr, seed=0,
             log=lambda r: say(f"pretrain epoch {r['epoch']} loss {r['loss']:.4f}"))
    acc, majority = masked_token_accuracy(backbone, [s.utterance for s in test])
    say(f"masked-token accuracy {acc:.4f} (majority {majority:.4f})")

    labels = np.array([s.wer_label for s in test])
    scores: dict[str, list[float]] = {h: [] for h in cfg.heads}
    for seed in cfg.seeds:
        for head in cfg.heads:
            qe = QEModel(backbone, HeadKind(head), fuser_hidden=cfg.fuser_hidden, seed=seed)
            qe.freeze_backbone()
            qe.cache_backbone(train + dev + test)
            if qe.head.kind.needs_phi:
                qe.fit_phi(train)
            qe.init_biases(train)
            train_qe(qe, train, dev, epochs=cfg.qe_epochs, lr=cfg.qe_lr,
                     patience=cfg.patience, seed=seed)
            r = pearson([p.expected_wer for p in qe.predict(test)], labels)
            scores[head].append(r)
            say(f"seed {seed} {head}: test pearson {r:.4f}")
    return BenchmarkResult(acc, majority, scores, time.perf_counter() - start)


def ordering_wins(result: BenchmarkResult, better: str, worse: str) -> int:
    """Number of seeds where ``better`` strictly beats ``worse``."""
    a, b = result.pearson[better], result.pearson[worse]
    return sum(x > y for x, y in zip(a, b))


def summarize(result: BenchmarkResult, heads: Sequence[str] | None = None) -> str:
    heads = heads or list(result.pearson)
    lines = [f"masked-token accuracy {result.masked_accuracy:.4f} vs majority {result.majority_baseline:.4f}"]
    for h in heads:
        vals = " ".join(f"{v:.4f}" for v in result.pearson[h])
        lines.append(f"{h:<12} mean {result.mean(h):.4f}  per-seed {vals}")
    lines.append(f"elapsed {result.seconds:.0f}s")
    return "\n".join(lines)
