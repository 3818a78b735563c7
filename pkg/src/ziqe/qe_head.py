"""WER regression heads on top of fused speech-BERT features.

The zero-inflated Beta head predicts ``lambda = P(WER = 0)`` and the mean
``mu`` of a Beta(mu * phi, (1 - mu) * phi) for positive WER, with ``phi``
fixed (usually the maximum-likelihood estimate over positive training
labels).  Its mu-gradient is delivered through the surrogate objective
``phi * mu * blocked(y* - mu*)`` with ``y* = logit(y)`` and
``mu* = digamma(phi mu) - digamma(phi (1 - mu))``: the blocked factor needs
only forward digamma values, yet the surrogate's derivative in ``mu`` equals
that of the Beta log-density.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import QESample
from .distributions import Y_CLAMP, fit_phi_mle
from .metrics import pearson
from .nn import tensor as T
from .nn.layers import bilstm_fuse, dense, init_bilstm, init_dense
from .nn.params import Adam
from .nn.tensor import Tensor
from .special import DomainError, digamma, ln_gamma
from .speech_bert import SpeechBert

__all__ = [
    "HeadKind",
    "HeadSpec",
    "QEModel",
    "ZeroInflatedPrediction",
    "baseline_loss",
    "beta_mu_score",
    "cap_wer",
    "finetune_step",
    "head_predict",
    "inflated_categorical_loss",
    "train_qe",
    "zi_beta_loss_and_grad",
]

WER_CAP = 1.0 - Y_CLAMP


class HeadKind(str, enum.Enum):
    ZI_BETA = "zi_beta"
    LINEAR = "linear"
    ZI_LINEAR = "zi_linear"
    LOGISTIC = "logistic"
    ZI_LOGISTIC = "zi_logistic"
    INFLATED_CATEGORICAL = "inflated_categorical"

    @property
    def zero_inflated(self) -> bool:
        return self is not HeadKind.LINEAR and self is not HeadKind.LOGISTIC

    @property
    def needs_phi(self) -> bool:
        return self in (HeadKind.ZI_BETA, HeadKind.INFLATED_CATEGORICAL)


@dataclass(frozen=True)
class HeadSpec:
    kind: HeadKind = HeadKind.ZI_BETA
    support: tuple[float, ...] = (0.0,)  # point masses of the categorical head

    def __post_init__(self):
        object.__setattr__(self, "kind", HeadKind(self.kind))
        if self.kind is HeadKind.INFLATED_CATEGORICAL and len(self.support) < 1:
            raise ValueError("the inflated categorical head needs K >= 1 support points")

    @property
    def n_classes(self) -> int:
        return len(self.support) + 1


@dataclass(frozen=True)
class ZeroInflatedPrediction:
    lambda_zero: float
    mu: float
    expected_wer: float


def cap_wer(y):
    """Clamp WER labels into the Beta-compatible range ``[0, 1 - 1e-6]``."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise DomainError("WER labels must be finite and non-negative")
    return np.minimum(y, WER_CAP)


def _sigmoid(x):
    return T.stable_sigmoid(np.asarray(x, dtype=np.float64))


def _log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return -(np.log1p(np.exp(-np.abs(x))) + np.maximum(-x, 0.0))


def beta_mu_score(mu, y, phi):
    """``phi * (y* - mu*)``, the derivative of the Beta log-density in ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    y = np.clip(np.asarray(y, dtype=np.float64), Y_CLAMP, 1.0 - Y_CLAMP)
    if np.any((mu <= 0.0) | (mu >= 1.0)):
        raise DomainError("mu saturated at 0 or 1")
    y_star = np.log(y) - np.log1p(-y)
    mu_star = digamma(phi * mu) - digamma(phi * (1.0 - mu))
    return phi * (y_star - mu_star)


def beta_surrogate(mu: Tensor, y, phi: float) -> Tensor:
    """Elementwise ``phi * mu * stop_gradient(y* - mu*)``.

    Its gradient in ``mu`` equals the Beta log-density score while only the
    forward pass ever evaluates digamma.
    """
    # float32 sigmoids round to exactly 0 or 1 long before float64 ones do
    eps = np.finfo(mu.dtype).eps
    m = np.clip(mu.data.astype(np.float64), eps, 1.0 - eps)
    return mu * Tensor(beta_mu_score(m, y, phi).astype(mu.dtype))


def _beta_nll(mu, y, phi):
    y = np.clip(y, Y_CLAMP, 1.0 - Y_CLAMP)
    a, b = phi * mu, phi * (1.0 - mu)
    return -(ln_gamma(phi) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y))


def zi_beta_loss_and_grad(g_mu, lambda_logit, y, phi: float):
    """Zero-inflated Beta negative log-likelihood and its upstream gradients.

    Parameters
    ----------
    g_mu : array_like
        Output of the mean branch (after the sigmoid), strictly inside (0, 1).
    lambda_logit : array_like
        Pre-sigmoid output of the zero gate.
    y : array_like
        WER labels; values above ``1 - 1e-6`` are capped.
    phi : float
        Beta precision.

    Returns
    -------
    loss : float
        Mean over samples of ``-[1{y=0} log lambda + 1{y>0} (log(1-lambda) + log p(y))]``.
    d_g_mu : ndarray
        Per-sample derivative of that sample's loss with respect to ``g_mu``,
        i.e. ``-phi (y* - mu*)`` for ``y > 0`` and 0 otherwise.
    d_lambda_logit : ndarray
        Per-sample derivative with respect to the gate logit, ``lambda - 1{y=0}``.
    """
    g_mu = np.atleast_1d(np.asarray(g_mu, dtype=np.float64))
    z = np.atleast_1d(np.asarray(lambda_logit, dtype=np.float64))
    y = np.atleast_1d(cap_wer(y))
    if not phi > 0:
        raise DomainError("phi must be positive")
    if np.any((g_mu <= 0.0) | (g_mu >= 1.0)):
        raise DomainError("g_mu saturated at 0 or 1")
    pos = y > 0.0
    lam = _sigmoid(z)
    bern = -np.where(pos, _log_sigmoid(-z), _log_sigmoid(z))
    nll = bern.copy()
    d_mu = np.zeros_like(g_mu)
    if pos.any():
        nll[pos] += _beta_nll(g_mu[pos], y[pos], phi)
        d_mu[pos] = -beta_mu_score(g_mu[pos], y[pos], phi)
    d_lam = lam - (~pos).astype(np.float64)
    return float(nll.mean()), d_mu, d_lam


def baseline_loss(kind: HeadKind, prediction: ZeroInflatedPrediction, y: float) -> float:
    """Per-sample loss of the plain and zero-inflated Linear / Logistic heads."""
    kind = HeadKind(kind)
    y = float(cap_wer(y))
    mu, lam = prediction.mu, prediction.lambda_zero
    if not 0.0 < mu < 1.0:
        raise DomainError("mu must lie in (0, 1)")

    def continuous() -> float:
        if kind in (HeadKind.LINEAR, HeadKind.ZI_LINEAR):
            return (mu - y) ** 2
        return -(y * math.log(mu) + (1.0 - y) * math.log1p(-mu))

    if kind in (HeadKind.LINEAR, HeadKind.LOGISTIC):
        return continuous()
    if kind not in (HeadKind.ZI_LINEAR, HeadKind.ZI_LOGISTIC):
        raise ValueError(f"{kind.value} is not a baseline head")
    if not 0.0 < lam < 1.0:
        raise DomainError("lambda must lie in (0, 1)")
    if y == 0.0:
        return -math.log(lam)
    return -math.log1p(-lam) + continuous()


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _support_class(y: float, support: Sequence[float]) -> int:
    """Class index of an uncapped label: 1..K for a support point, 0 for the continuous part."""
    for i, s in enumerate(support, start=1):
        if y == s:
            return i
    if y > 0.0:
        return 0
    raise DomainError(f"y={y} is neither a support point nor positive")


def inflated_categorical_loss(logits, support: Sequence[float], y: float, mu: float, phi: float) -> float:
    """NLL under the (K+1)-class inflated model.

    Class 0 is the continuous Beta component, class ``i`` the point mass at
    ``support[i-1]``; a softmax over ``logits`` gives all K+1 weights.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (len(support) + 1,):
        raise ValueError(f"need {len(support) + 1} logits, got shape {logits.shape}")
    cls = _support_class(float(y), support)
    y = float(cap_wer(y))
    z = logits - logits.max()
    log_p = z - math.log(np.exp(z).sum())
    nll = -float(log_p[cls])
    if cls == 0:
        nll += float(_beta_nll(np.float64(mu), np.float64(y), phi))
    return nll


def phi_from_labels(wer_labels) -> float:
    """Beta precision MLE over the positive WER labels, capped below 1."""
    y = cap_wer(wer_labels)
    return fit_phi_mle(np.clip(y[y > 0], Y_CLAMP, WER_CAP))


# -- model ---------------------------------------------------------------------------
class QEModel:
    """speech-BERT features -> Bi-LSTM fusion -> regression head.

    The backbone's parameters are copied into a fresh store, so several heads
    can be fine-tuned from one pretrained checkpoint.  Fusion weights live
    under ``fuser/`` and head weights under ``qe_head/``.
    """

    def __init__(self, backbone: SpeechBert, head: HeadSpec | HeadKind | str = HeadKind.ZI_BETA,
                 fuser_hidden: int = 64, phi: float = 1.0, seed: int = 0, use_expected: bool = True):
        self.head = head if isinstance(head, HeadSpec) else HeadSpec(HeadKind(head))
        self.backbone = SpeechBert(backbone.config, specials=backbone.specials,
                                   store=backbone.store.astype(backbone.dtype))
        self.store = self.backbone.store
        self.phi = float(phi)
        self.fuser_hidden = fuser_hidden
        self.use_expected = use_expected
        self._cache: dict[str, np.ndarray] | None = None
        rng = np.random.default_rng(seed)
        d = backbone.config.d_model
        init_bilstm(self.store, "fuser", d, fuser_hidden, rng)
        init_dense(self.store, "qe_head/mu", 2 * fuser_hidden, 1, rng)
        if self.head.kind is HeadKind.INFLATED_CATEGORICAL:
            init_dense(self.store, "qe_head/classes", 2 * fuser_hidden, self.head.n_classes, rng)
        elif self.head.kind.zero_inflated:
            init_dense(self.store, "qe_head/lambda", 2 * fuser_hidden, 1, rng)

    # -- configuration -----------------------------------------------------------------
    def fit_phi(self, samples: Sequence[QESample]) -> float:
        """Set ``phi`` to the Beta MLE over the positive (capped) WER labels."""
        self.phi = phi_from_labels([s.wer_label for s in samples])
        return self.phi

    def init_biases(self, samples: Sequence[QESample]) -> None:
        """Start the output biases at the label prior (zero mass, mean WER)."""
        y = cap_wer([s.wer_label for s in samples])
        pos = y > 0
        target = y[pos].mean() if self.head.kind.zero_inflated and pos.any() else y.mean()
        target = float(np.clip(target, 1e-3, 1 - 1e-3))
        self.store["qe_head/mu/b"].data[:] = math.log(target / (1.0 - target))
        zero = float(np.clip(np.mean(~pos), 1e-3, 1 - 1e-3))
        if "qe_head/lambda/b" in self.store:
            self.store["qe_head/lambda/b"].data[:] = math.log(zero / (1.0 - zero))
        if "qe_head/classes/b" in self.store:
            b = self.store["qe_head/classes/b"].data
            b[:] = 0.0
            for i, v in enumerate(self.head.support, start=1):
                mass = float(np.clip(np.mean(y == v), 1e-3, 1.0))
                b[i] = math.log(mass / max(1.0 - zero, 1e-3))

    def freeze_backbone(self, frozen: bool = True) -> None:
        for prefix in ("speech/", "text/"):
            self.store.set_trainable(prefix, not frozen)
        if not frozen:
            self._cache = None

    @property
    def backbone_frozen(self) -> bool:
        return not self.store["text/embed"].requires_grad

    def backbone_names(self) -> list[str]:
        return self.store.names("speech/") + self.store.names("text/")

    def _tokens(self, sample: QESample) -> list[int]:
        sp = self.backbone.specials
        return [sp.bos_id, *sample.hypothesis, sp.eos_id]

    def cache_backbone(self, samples: Sequence[QESample], batch_size: int = 64) -> None:
        """Precompute frozen-backbone states so fine-tuning skips the transformer."""
        if not self.backbone_frozen:
            raise RuntimeError("caching requires a frozen backbone")
        cache = self._cache or {}
        todo = [s for s in samples if s.id not in cache]
        for i in range(0, len(todo), batch_size):
            chunk = todo[i:i + batch_size]
            states, valid = self.backbone.encode_batch([s.features for s in chunk],
                                                       [self._tokens(s) for s in chunk])
            for b, s in enumerate(chunk):
                cache[s.id] = states.data[b, : int(valid[b].sum())].copy()
        self._cache = cache

    # -- forward -------------------------------------------------------------------------
    def fused(self, samples: Sequence[QESample]) -> Tensor:
        token_seqs = [self._tokens(s) for s in samples]
        lengths = np.array([len(t) for t in token_seqs])
        if self._cache is not None and self.backbone_frozen and all(s.id in self._cache for s in samples):
            x = np.zeros((len(samples), lengths.max(), self.backbone.config.d_model), dtype=self.store.dtype)
            for b, s in enumerate(samples):
                x[b, : lengths[b]] = self._cache[s.id]
            states = Tensor(x)
        else:
            states, _ = self.backbone.encode_batch([s.features for s in samples], token_seqs)
        return bilstm_fuse(states, self.store, "fuser", lengths)

    def head_outputs(self, h: Tensor) -> dict[str, Tensor]:
        out = {"mu_logit": dense(h, self.store, "qe_head/mu").reshape(-1)}
        if self.head.kind is HeadKind.INFLATED_CATEGORICAL:
            out["class_logits"] = dense(h, self.store, "qe_head/classes")
        elif self.head.kind.zero_inflated:
            out["lambda_logit"] = dense(h, self.store, "qe_head/lambda").reshape(-1)
        return out

    def loss(self, samples: Sequence[QESample]) -> Tensor:
        """Mean per-sample training objective for a batch."""
        if not samples:
            raise ValueError("empty batch")
        y = np.array([s.wer_label for s in samples], dtype=np.float64)
        return self.objective(self.head_outputs(self.fused(samples)), y)

    def objective(self, outs: dict[str, Tensor], labels: np.ndarray) -> Tensor:
        """Mean objective given head outputs and raw (uncapped) WER labels."""
        kind = self.head.kind
        y = cap_wer(labels)
        mu_logit = outs["mu_logit"]
        n = y.size
        pos = y > 0.0
        posf = pos.astype(mu_logit.dtype)
        if kind is HeadKind.ZI_BETA:
            return _zi_beta_objective(mu_logit, outs["lambda_logit"], y, self.phi)
        if kind is HeadKind.INFLATED_CATEGORICAL:
            return _categorical_objective(outs["class_logits"], mu_logit, np.asarray(labels, dtype=np.float64),
                                          self.head.support, self.phi)

        if kind in (HeadKind.LINEAR, HeadKind.ZI_LINEAR):
            per = T.square(T.sigmoid(mu_logit) - Tensor(y.astype(mu_logit.dtype)))
        else:
            per = T.softplus(mu_logit) - mu_logit * Tensor(y.astype(mu_logit.dtype))
        if not kind.zero_inflated:
            return per.sum() * (1.0 / n)
        gate = _bernoulli_nll(outs["lambda_logit"], pos)
        return (gate + per * Tensor(posf)).sum() * (1.0 / n)

    def predict(self, samples: Sequence[QESample], batch_size: int = 128) -> list[ZeroInflatedPrediction]:
        preds = []
        for i in range(0, len(samples), batch_size):
            outs = self.head_outputs(self.fused(samples[i:i + batch_size]))
            preds.extend(_predictions(self.head, {k: v.data for k, v in outs.items()}, self.use_expected))
        return preds

    def head_state(self) -> dict[str, np.ndarray]:
        return {n: self.store[n].data.copy() for n in self.store.names("fuser/") + self.store.names("qe_head/")}


def _bernoulli_nll(lambda_logit: Tensor, positive: np.ndarray) -> Tensor:
    # -log(lambda) for y = 0 and -log(1 - lambda) for y > 0, from logits.
    sign = np.where(positive, 1.0, -1.0).astype(lambda_logit.dtype)
    return T.softplus(lambda_logit * Tensor(sign))


def _with_value(objective: Tensor, value: float) -> Tensor:
    """Shift ``objective`` by a constant so its reported value is ``value``."""
    return objective + Tensor(np.asarray(value - float(objective.data), dtype=objective.dtype))


def _zi_beta_objective(mu_logit: Tensor, lambda_logit: Tensor, y: np.ndarray, phi: float) -> Tensor:
    n = y.size
    pos = y > 0.0
    mu = T.sigmoid(mu_logit)
    objective = _bernoulli_nll(lambda_logit, pos).sum()
    if pos.any():
        objective = objective - T.tsum(beta_surrogate(mu[pos], y[pos], phi))
    objective = objective * (1.0 / n)
    true_nll, _, _ = zi_beta_loss_and_grad(_sigmoid(mu_logit.data), lambda_logit.data, y, phi)
    return _with_value(objective, true_nll)


def _categorical_objective(class_logits: Tensor, mu_logit: Tensor, labels: np.ndarray,
                           support: Sequence[float], phi: float) -> Tensor:
    n = labels.size
    cls = np.array([_support_class(float(v), support) for v in labels])
    y = cap_wer(labels)
    cont = cls == 0
    gate = T.cross_entropy(class_logits, cls)
    mu = T.sigmoid(mu_logit)
    objective = gate
    beta_nll = 0.0
    if cont.any():
        mu64 = _sigmoid(mu_logit.data[cont])
        beta_nll = float(_beta_nll(mu64, y[cont], phi).sum())
        objective = objective - T.tsum(beta_surrogate(mu[cont], y[cont], phi)) * (1.0 / n)
    return _with_value(objective, float(gate.data) + beta_nll / n)


def _predictions(head: HeadSpec, outs: dict[str, np.ndarray], use_expected: bool) -> list[ZeroInflatedPrediction]:
    mu = _sigmoid(outs["mu_logit"])
    if head.kind is HeadKind.INFLATED_CATEGORICAL:
        probs = _softmax(np.asarray(outs["class_logits"], dtype=np.float64))
        lam = probs[:, 1:].sum(axis=1)
        point = probs[:, 1:] @ np.asarray(head.support, dtype=np.float64)
        expected = point + probs[:, 0] * mu
    elif head.kind.zero_inflated:
        lam = _sigmoid(outs["lambda_logit"])
        expected = (1.0 - lam) * mu
    else:
        lam = np.zeros_like(mu)
        expected = mu
    if not use_expected:
        expected = mu
    return [ZeroInflatedPrediction(float(a), float(b), float(c)) for a, b, c in zip(lam, mu, expected)]


def head_predict(h, store, head: HeadSpec | HeadKind | str = HeadKind.ZI_BETA,
                 use_expected: bool = True) -> ZeroInflatedPrediction:
    """Prediction for one fused feature vector ``h`` using ``qe_head/`` weights."""
    head = head if isinstance(head, HeadSpec) else HeadSpec(HeadKind(head))
    h = np.asarray(getattr(h, "data", h), dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(h)):
        raise ValueError("fused features must be finite")
    w = store["qe_head/mu/w"].data
    if h.shape[1] != w.shape[0]:
        raise ValueError(f"feature dim {h.shape[1]} does not match head input {w.shape[0]}")

    def affine(name):
        return h @ store[f"qe_head/{name}/w"].data.astype(np.float64) + store[f"qe_head/{name}/b"].data

    outs = {"mu_logit": affine("mu")[:, 0]}
    if head.kind is HeadKind.INFLATED_CATEGORICAL:
        outs["class_logits"] = affine("classes")
    elif head.kind.zero_inflated:
        outs["lambda_logit"] = affine("lambda")[:, 0]
    return _predictions(head, outs, use_expected)[0]


# -- training ------------------------------------------------------------------------
def finetune_step(model: QEModel, batch: Sequence[QESample], optimizer: Adam) -> float:
    """One gradient step on ``batch``; returns the reported (true) loss."""
    model.store.zero_grad()
    loss = model.loss(batch)
    if not math.isfinite(float(loss.data)):
        raise FloatingPointError("non-finite fine-tuning loss")
    loss.backward()
    optimizer.step()
    return float(loss.data)


def train_qe(model: QEModel, train: Sequence[QESample], dev: Sequence[QESample] | None = None,
             epochs: int = 10, batch_size: int = 32, lr: float = 1e-3, patience: int = 3,
             seed: int = 0, log=None) -> list[dict]:
    """Fine-tune with early stopping on dev Pearson; the best weights are restored."""
    opt = Adam(model.store, lr)
    rng = np.random.default_rng(seed)
    history = []
    best, best_state, bad = -math.inf, None, 0
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), batch_size):
            losses.append(finetune_step(model, [train[j] for j in order[i:i + batch_size]], opt))
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if dev:
            preds = np.array([p.expected_wer for p in model.predict(dev)])
            try:
                record["dev_pearson"] = pearson(preds, [s.wer_label for s in dev])
            except ValueError:
                record["dev_pearson"] = -1.0
            if record["dev_pearson"] > best:
                best, bad = record["dev_pearson"], 0
                best_state = model.store.state_dict()
            else:
                bad += 1
        history.append(record)
        if log:
            log(record)
        if dev and bad >= patience:
            break
    if best_state is not None:
        model.store.load_state_dict(best_state)
    return history
