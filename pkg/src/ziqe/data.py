"""Synthetic paired speech/text corpora with zero-inflated WER labels.

Real filter-bank features are replaced by token templates: every vocabulary
id owns a fixed random vector, an utterance's frames repeat the template of
each token ``frames_per_token`` times, and Gaussian noise is added.  The
features therefore carry the transcript, which is what a conditional masked
LM needs to learn anything.

Seeds: utterance ``i`` of a corpus with root seed ``r`` draws its tokens and
noise from ``numpy.random.default_rng(SeedSequence([r, i, 0]))`` and its
hypothesis corruption from ``SeedSequence([r, i, 1])``.  Templates come from
``SeedSequence([template_seed, 2])``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import word_error_rate
from .nn.params import load_checkpoint, save_checkpoint
from .tokens import SPECIALS

DATASET_SCHEMA = "ziqe-dataset v1"
WER_TOLERANCE = 5e-7  # stored WER has 6 decimals


@dataclass
class FeatureMatrix:
    data: np.ndarray
    raw_dim: int
    stack_window: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("features must be a non-empty (frames, dims) matrix")
        if self.data.shape[1] != self.raw_dim * self.stack_window:
            raise ValueError(
                f"feature width {self.data.shape[1]} != raw_dim {self.raw_dim} x window {self.stack_window}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("features must be finite")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]


@dataclass
class Utterance:
    id: str
    tokens: list[int]
    features: FeatureMatrix

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ValueError(f"utterance {self.id!r} has no tokens")


@dataclass
class QESample:
    utterance: Utterance
    hypothesis: list[int]
    wer_label: float = field(default=None)

    def __post_init__(self):
        exact = word_error_rate(self.utterance.tokens, self.hypothesis)
        if self.wer_label is None:
            self.wer_label = exact
        elif abs(self.wer_label - exact) > WER_TOLERANCE:
            raise ValueError(f"sample {self.id!r}: stored WER {self.wer_label} != recomputed {exact}")
        else:
            self.wer_label = exact

    @property
    def id(self) -> str:
        return self.utterance.id

    @property
    def reference(self) -> list[int]:
        return self.utterance.tokens

    @property
    def features(self) -> FeatureMatrix:
        return self.utterance.features


@dataclass(frozen=True)
class CorruptionConfig:
    """Hypothesis corruption rates.

    With probability ``p_clean`` the hypothesis is the reference.  Otherwise
    each reference token is substituted (``p_sub``) or deleted (``p_del``),
    and after every position a geometric number of random tokens is inserted
    (continue with probability ``p_ins``).
    """

    p_clean: float = 0.4
    p_sub: float = 0.1
    p_del: float = 0.05
    p_ins: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("p_clean", "p_sub", "p_del", "p_ins"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.p_sub + self.p_del > 1.0:
            raise ValueError("p_sub + p_del must not exceed 1")
        if self.p_ins >= 1.0:
            raise ValueError("p_ins must be below 1 (insertions are geometric)")


def stack_frames(raw: FeatureMatrix, window: int = 4, stride: int | None = None) -> FeatureMatrix:
    """Concatenate ``window`` consecutive frames into one row.

    Rows start every ``stride`` frames (default: ``window``, i.e. no
    overlap).  Windows running past the end repeat the final frame.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    stride = window if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if raw.stack_window != 1:
        raise ValueError("features are already stacked")
    x = raw.data
    n = x.shape[0]
    starts = np.arange(0, n, stride)
    idx = np.minimum(starts[:, None] + np.arange(window)[None, :], n - 1)
    return FeatureMatrix(x[idx].reshape(len(starts), window * x.shape[1]), raw.raw_dim, window)


def token_templates(vocab_size: int, raw_dim: int, template_seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([template_seed, 2]))
    return rng.normal(0.0, 1.0, size=(vocab_size, raw_dim)).astype(np.float32)


def _check_vocab(vocab_size: int) -> None:
    if vocab_size < SPECIALS.first_content_id + 1:
        raise ValueError(f"vocab_size must be at least {SPECIALS.first_content_id + 1}")


def synth_utterance(vocab_size: int, length_range: tuple[int, int], seed, *,
                    raw_dim: int = 16, frames_per_token: int = 4, noise_scale: float = 0.5,
                    templates: np.ndarray | None = None, template_seed: int = 0,
                    uid: str | None = None) -> Utterance:
    """Random content tokens with template-plus-noise raw features.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`.
    ``length_range`` is inclusive on both ends.
    """
    _check_vocab(vocab_size)
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {length_range}")
    if frames_per_token < 1 or noise_scale < 0:
        raise ValueError("frames_per_token must be >= 1 and noise_scale >= 0")
    if templates is None:
        templates = token_templates(vocab_size, raw_dim, template_seed)
    if templates.shape != (vocab_size, raw_dim):
        raise ValueError("template table does not match vocab_size x raw_dim")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    tokens = rng.integers(SPECIALS.first_content_id, vocab_size, size=n)
    frames = np.repeat(templates[tokens], frames_per_token, axis=0)
    noise = rng.normal(0.0, 1.0, size=frames.shape).astype(np.float32)
    frames = frames + np.float32(noise_scale) * noise
    uid = uid if uid is not None else f"utt{int(rng.integers(0, 2**31)):010d}"
    return Utterance(uid, [int(t) for t in tokens], FeatureMatrix(frames, raw_dim, 1))


def corrupt_hypothesis(reference: Sequence[int], config: CorruptionConfig, vocab_size: int,
                       seed=None) -> tuple[list[int], float]:
    """Simulated ASR output for ``reference`` and its WER.

    ``seed`` overrides ``config.seed`` (int or SeedSequence).
    """
    if len(reference) == 0:
        raise ValueError("cannot corrupt an empty reference")
    _check_vocab(vocab_size)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    lo = SPECIALS.first_content_id

    def random_token(avoid: int | None = None) -> int:
        while True:
            t = int(rng.integers(lo, vocab_size))
            if t != avoid or vocab_size - lo == 1:
                return t

    if rng.random() < config.p_clean:
        return list(reference), 0.0

    hyp: list[int] = []

    def insertions():
        while rng.random() < config.p_ins:
            hyp.append(random_token())

    insertions()
    for tok in reference:
        r = rng.random()
        if r < config.p_sub:
            hyp.append(random_token(avoid=tok))
        elif r >= config.p_sub + config.p_del:
            hyp.append(int(tok))
        insertions()
    return hyp, word_error_rate(reference, hyp)


@dataclass(frozen=True)
class CorpusConfig:
    n_utterances: int = 5000
    vocab_size: int = 50
    min_len: int = 5
    max_len: int = 15
    raw_dim: int = 16
    frames_per_token: int = 4
    noise_scale: float = 0.5
    stack_window: int = 4
    stack_stride: int | None = None
    template_seed: int = 0
    root_seed: int = 0
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)


def generate_corpus(cfg: CorpusConfig) -> list[QESample]:
    templates = token_templates(cfg.vocab_size, cfg.raw_dim, cfg.template_seed)
    samples = []
    for i in range(cfg.n_utterances):
        utt = synth_utterance(
            cfg.vocab_size, (cfg.min_len, cfg.max_len), np.random.SeedSequence([cfg.root_seed, i, 0]),
            raw_dim=cfg.raw_dim, frames_per_token=cfg.frames_per_token, noise_scale=cfg.noise_scale,
            templates=templates, uid=f"utt{i:06d}",
        )
        utt.features = stack_frames(utt.features, cfg.stack_window, cfg.stack_stride)
        hyp, wer = corrupt_hypothesis(
            utt.tokens, cfg.corruption, cfg.vocab_size, np.random.SeedSequence([cfg.root_seed, i, 1])
        )
        samples.append(QESample(utt, hyp, wer))
    return samples


# -- file I/O ------------------------------------------------------------------------
class DatasetFormatError(ValueError):
    pass


def write_features(path, features: dict[str, FeatureMatrix]) -> None:
    save_checkpoint(path, {k: v.data for k, v in features.items()})


def read_features(path, raw_dim: int, stack_window: int = 1) -> dict[str, FeatureMatrix]:
    return {k: FeatureMatrix(v, raw_dim, stack_window) for k, v in load_checkpoint(path).items()}


def write_dataset(path, samples: Iterable[QESample], feature_file: str | None = None) -> None:
    """Write the tab-separated record file plus one binary feature file.

    The feature file (default: ``<dataset name>.feats``) is written next to
    the dataset and referenced by name in every record.
    """
    path = Path(path)
    samples = list(samples)
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    feature_file = feature_file or path.name + ".feats"
    first = samples[0].features
    lines = [f"#{DATASET_SCHEMA} raw_dim={first.raw_dim} stack_window={first.stack_window}"]
    for s in samples:
        if "\t" in s.id or "\n" in s.id:
            raise ValueError(f"sample id {s.id!r} contains a tab or newline")
        lines.append("\t".join([
            s.id,
            " ".join(map(str, s.reference)),
            " ".join(map(str, s.hypothesis)),
            f"{s.wer_label:.6f}",
            feature_file,
        ]))
    write_features(path.parent / feature_file, {s.id: s.features for s in samples})
    path.write_text("\n".join(lines) + "\n")


_HEADER_RE = re.compile(r"^#" + re.escape(DATASET_SCHEMA) + r" raw_dim=(\d+) stack_window=(\d+)$")


def read_dataset(path) -> list[QESample]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}:1: empty file")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise DatasetFormatError(f"{path}:1: bad header {lines[0]!r}")
    raw_dim, window = int(m.group(1)), int(m.group(2))
    feature_cache: dict[str, dict[str, FeatureMatrix]] = {}
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DatasetFormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        uid, ref, hyp, wer, feat_name = parts
        try:
            ref_ids = [int(t) for t in ref.split()]
            hyp_ids = [int(t) for t in hyp.split()]
            wer_val = float(wer)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        if feat_name not in feature_cache:
            feature_cache[feat_name] = read_features(path.parent / feat_name, raw_dim, window)
        feats = feature_cache[feat_name].get(uid)
        if feats is None:
            raise DatasetFormatError(f"{path}:{lineno}: no features for {uid!r} in {feat_name}")
        try:
            samples.append(QESample(Utterance(uid, ref_ids, feats), hyp_ids, wer_val))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    return samples


def split_indices(n: int, held_out: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train / held-out index split."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 3])).permutation(n)
    n_held = int(math.floor(n * held_out))
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])
