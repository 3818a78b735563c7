"""``ziqe`` command-line entry point.

Usage::

    ziqe [--config FILE] [--seed N] [--out DIR] COMMAND [key=value ...]

Settings come from defaults, then the ``--config`` file, then ``key=value``
arguments, then ``--seed``.  Unknown keys are rejected.  Every command writes
the resolved settings to ``<out>/<command>.config`` before doing any work.

Output formats
--------------
config files
    One ``key=value`` per line; blank lines and ``#`` comments are ignored.
predictions (``predictions.tsv``)
    ``id<TAB>lambda<TAB>mu<TAB>expected_wer`` per sample, floats in ``repr``
    form, preceded by one ``#`` header line.
evaluation report (``report.txt`` / ``report.json``)
    ``report.txt`` holds ``#`` lines describing the NDCG and F1 conventions
    followed by ``key=value`` lines (``mae``, ``pearson``, ``ndcg``, ``f1``,
    ``count``, ``mae_scaled``).  ``report.json`` is the same record on one
    line.  ``buckets.tsv`` lists Pearson per token-length decile.
checkpoints
    ``*.ckpt`` use the binary tensor format of :mod:`ziqe.nn.params`; the
    matching ``*.json`` sidecar stores the model configuration, the head kind
    and phi.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from .benchmark import BenchmarkConfig, run_head_comparison, summarize
from .data import (CorpusConfig, CorruptionConfig, DatasetFormatError, QESample, generate_corpus,
                   read_dataset, split_indices, write_dataset)
from .metrics import evaluate, length_bucket_pearson
from .nn.params import CheckpointError, load_checkpoint, save_checkpoint
from .pretrain import masked_token_accuracy, pretrain
from .qe_head import HeadKind, HeadSpec, QEModel, phi_from_labels, train_qe
from .speech_bert import ModelConfig, SpeechBert
from .verify import format_table, gradient_checks


@dataclasses.dataclass
class RunConfig:
    # corpus
    n_utterances: int = 5000
    vocab_size: int = 50
    min_len: int = 5
    max_len: int = 15
    raw_dim: int = 16
    frames_per_token: int = 4
    noise_scale: float = 0.5
    stack_window: int = 4
    stack_stride: int = 0
    p_clean: float = 0.4
    p_sub: float = 0.1
    p_del: float = 0.05
    p_ins: float = 0.05
    # backbone
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    memory_layers: int = 2
    feedforward_dim: int = 128
    lambda_st: float = 0.15
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    batch_size: int = 32
    # quality-estimation head
    head: str = "zi_beta"
    phi: str = "mle"
    support: str = "0"
    fuser_hidden: int = 64
    finetune_epochs: int = 25
    finetune_lr: float = 3e-3
    patience: int = 5
    dev_fraction: float = 0.1
    freeze_backbone: bool = True
    # runs
    seed: int = 0
    dataset: str = ""
    checkpoint: str = ""
    predictions: str = ""
    sample: str = ""

    def update(self, pairs: dict[str, str]) -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        for key, raw in pairs.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(fields[key].type, key, raw))

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(self).items())

    def corpus(self) -> CorpusConfig:
        return CorpusConfig(
            n_utterances=self.n_utterances, vocab_size=self.vocab_size, min_len=self.min_len,
            max_len=self.max_len, raw_dim=self.raw_dim, frames_per_token=self.frames_per_token,
            noise_scale=self.noise_scale, stack_window=self.stack_window,
            stack_stride=self.stack_stride or None, root_seed=self.seed,
            corruption=CorruptionConfig(self.p_clean, self.p_sub, self.p_del, self.p_ins, self.seed),
        )

    def model(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size, feature_dim=feature_dim, d_model=self.d_model, heads=self.heads,
            encoder_layers=self.encoder_layers, memory_layers=self.memory_layers,
            feedforward_dim=self.feedforward_dim, lambda_st=self.lambda_st,
        )

    def head_spec(self) -> HeadSpec:
        kind = HeadKind(self.head)
        if kind is HeadKind.INFLATED_CATEGORICAL:
            return HeadSpec(kind, tuple(float(v) for v in self.support.split(",")))
        return HeadSpec(kind)


def _coerce(kind: str, key: str, raw: str):
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(lines) -> dict[str, str]:
    pairs = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


# -- checkpoint helpers --------------------------------------------------------------
def _save_model(path: Path, arrays: dict, meta: dict) -> None:
    save_checkpoint(path, arrays)
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def _load_meta(path: Path) -> dict:
    side = path.with_suffix(".json")
    if not side.exists():
        raise FileNotFoundError(f"missing checkpoint metadata {side}")
    return json.loads(side.read_text())


def _load_backbone(path: Path) -> SpeechBert:
    meta = _load_meta(path)
    model = SpeechBert(ModelConfig.from_dict(meta["model"]))
    arrays = load_checkpoint(path)
    model.store.load_state_dict({k: v for k, v in arrays.items() if k.startswith(("speech/", "text/"))})
    return model


def _load_qe(path: Path) -> QEModel:
    meta = _load_meta(path)
    if "head" not in meta:
        raise ValueError(f"{path} is a backbone checkpoint, not a fine-tuned QE model")
    backbone = SpeechBert(ModelConfig.from_dict(meta["model"]))
    head = HeadSpec(HeadKind(meta["head"]), tuple(meta["support"]))
    qe = QEModel(backbone, head, fuser_hidden=meta["fuser_hidden"], phi=meta["phi"])
    qe.store.load_state_dict(load_checkpoint(path))
    return qe


def _require(value: str, key: str) -> Path:
    if not value:
        raise ValueError(f"{key}= is required for this command")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"{key}: {path} does not exist")
    return path


def _dataset(cfg: RunConfig) -> list[QESample]:
    return read_dataset(_require(cfg.dataset, "dataset"))


# -- commands ------------------------------------------------------------------------
def cmd_synth(cfg: RunConfig, out: Path) -> int:
    samples = generate_corpus(cfg.corpus())
    write_dataset(out / "dataset.tsv", samples)
    zero = np.mean([s.wer_label == 0 for s in samples])
    print(f"wrote {len(samples)} samples to {out / 'dataset.tsv'} (zero-WER mass {zero:.3f})")
    return 0


def cmd_pretrain(cfg: RunConfig, out: Path) -> int:
    samples = _dataset(cfg)
    model = SpeechBert(cfg.model(samples[0].features.dims), seed=cfg.seed)
    curve = out / "pretrain_loss.tsv"
    curve.write_text("epoch\tloss\n")

    def log(record):
        with curve.open("a") as fh:
            fh.write(f"{record['epoch']}\t{record['loss']!r}\n")
        print(f"epoch {record['epoch']} loss {record['loss']:.4f}")

    pretrain(model, [s.utterance for s in samples], epochs=cfg.pretrain_epochs, batch_size=cfg.batch_size,
             lr=cfg.pretrain_lr, seed=cfg.seed, log=log)
    acc, majority = masked_token_accuracy(model, [s.utterance for s in samples])
    print(f"masked-token accuracy {acc:.4f} (majority baseline {majority:.4f})")
    _save_model(out / "backbone.ckpt", model.store.state_dict(),
                {"model": json.loads(model.config.to_json()), "masked_accuracy": acc})
    return 0


def cmd_fitphi(cfg: RunConfig, out: Path) -> int:
    samples = _dataset(cfg)
    qe_phi = phi_from_labels([s.wer_label for s in samples])
    (out / "phi.txt").write_text(f"{qe_phi!r}\n")
    print(f"phi={qe_phi!r}")
    return 0


def cmd_finetune(cfg: RunConfig, out: Path) -> int:
    samples = _dataset(cfg)
    backbone = _load_backbone(_require(cfg.checkpoint, "checkpoint"))
    train_idx, dev_idx = split_indices(len(samples), cfg.dev_fraction, cfg.seed)
    train = [samples[i] for i in train_idx]
    dev = [samples[i] for i in dev_idx]
    qe = QEModel(backbone, cfg.head_spec(), fuser_hidden=cfg.fuser_hidden, seed=cfg.seed)
    if cfg.phi == "mle":
        if qe.head.kind.needs_phi:
            qe.fit_phi(train)
    else:
        qe.phi = float(cfg.phi)
    qe.init_biases(train)
    if cfg.freeze_backbone:
        qe.freeze_backbone()
        qe.cache_backbone(samples)
    history = train_qe(qe, train, dev or None, epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
                       lr=cfg.finetune_lr, patience=cfg.patience, seed=cfg.seed,
                       log=lambda r: print(json.dumps(r, sort_keys=True)))
    (out / "finetune_history.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
    meta = {"model": json.loads(backbone.config.to_json()), "head": qe.head.kind.value,
            "support": list(qe.head.support), "phi": qe.phi, "fuser_hidden": cfg.fuser_hidden}
    _save_model(out / "qe.ckpt", qe.store.state_dict(), meta)
    print(f"saved {out / 'qe.ckpt'} (head={qe.head.kind.value}, phi={qe.phi:.6g})")
    return 0


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    qe = _load_qe(_require(cfg.checkpoint, "checkpoint"))
    samples = _dataset(cfg)
    lines = ["#id\tlambda\tmu\texpected_wer"]
    for s, p in zip(samples, qe.predict(samples)):
        lines.append(f"{s.id}\t{p.lambda_zero!r}\t{p.mu!r}\t{p.expected_wer!r}")
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(samples)} predictions to {out / 'predictions.tsv'}")
    return 0


def read_predictions(path: Path) -> dict[str, float]:
    preds = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        preds[parts[0]] = float(parts[3])
    return preds


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    preds = read_predictions(_require(cfg.predictions, "predictions"))
    samples = _dataset(cfg)
    missing = [s.id for s in samples if s.id not in preds]
    if missing:
        raise ValueError(f"no prediction for {len(missing)} samples, e.g. {missing[0]}")
    p = [preds[s.id] for s in samples]
    y = [s.wer_label for s in samples]
    report = evaluate(p, y)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_record() + "\n")
    buckets = length_bucket_pearson(p, y, [len(s.hypothesis) for s in samples])
    rows = ["min_len\tmax_len\tcount\tpearson"]
    rows += [f"{b['min_len']:g}\t{b['max_len']:g}\t{b['count']}\t{b['pearson']}" for b in buckets]
    (out / "buckets.tsv").write_text("\n".join(rows) + "\n")
    print(report.to_text(), end="")
    print("\n".join(rows))
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    rows = gradient_checks(seed=cfg.seed)
    table = format_table(rows)
    (out / "gradcheck.txt").write_text(table + "\n")
    print(table)
    return 0 if all(r.passed for r in rows) else 1


def cmd_dump_attention(cfg: RunConfig, out: Path) -> int:
    path = _require(cfg.checkpoint, "checkpoint")
    model = _load_backbone(path)
    samples = {s.id: s for s in _dataset(cfg)}
    if cfg.sample not in samples:
        raise ValueError(f"sample {cfg.sample!r} not found in the dataset")
    s = samples[cfg.sample]
    tokens = [model.specials.bos_id, *s.hypothesis, model.specials.eos_id]
    layers = model.dump_attention(s.features.data, tokens)
    target = out / f"attention_{s.id}.ckpt"
    save_checkpoint(target, {f"layer{i}": w for i, w in enumerate(layers)})
    print(f"wrote {len(layers)} cross-attention matrices {layers[0].shape} to {target}")
    return 0


def cmd_benchmark(cfg: RunConfig, out: Path) -> int:
    result = run_head_comparison(BenchmarkConfig(seeds=tuple(range(cfg.seed, cfg.seed + 4))), log=print)
    text = summarize(result)
    (out / "benchmark.txt").write_text(text + "\n")
    print(text)
    return 0


COMMANDS: dict[str, Callable[[RunConfig, Path], int]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "fitphi": cmd_fitphi,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "dump-attention": cmd_dump_attention,
    "benchmark": cmd_benchmark,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ziqe", description="Zero-inflated Beta WER estimation toolkit")
    parser.add_argument("--config", type=Path, help="key=value settings file")
    parser.add_argument("--seed", type=int, help="root seed (overrides the config)")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        cfg.update(parse_pairs(args.config.read_text().splitlines()))
    cfg.update(parse_pairs(args.overrides))
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"{args.command}.config").write_text(cfg.to_text())
        return COMMANDS[args.command](cfg, args.out)
    except (OSError, ValueError, KeyError, FloatingPointError, CheckpointError, DatasetFormatError) as exc:
        print(f"ziqe {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
