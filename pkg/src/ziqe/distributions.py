"""Beta distribution (mean/precision and shape forms), the zero-inflated
Beta mixture, and maximum-likelihood estimation of the precision."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .special import DomainError, digamma, ln_gamma

__all__ = [
    "BetaMeanPrecision",
    "BetaShape",
    "ZeroInflatedParams",
    "Y_CLAMP",
    "beta_log_pdf",
    "beta_variance",
    "fit_phi_mle",
    "zero_inflated_log_likelihood",
]

Y_CLAMP = 1e-6


@dataclass(frozen=True)
class BetaMeanPrecision:
    mu: float
    phi: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and 0.0 < self.mu < 1.0):
            raise DomainError(f"mu must lie in (0, 1), got {self.mu}")
        if not (math.isfinite(self.phi) and self.phi > 0.0):
            raise DomainError(f"phi must be positive and finite, got {self.phi}")

    def to_shape(self) -> "BetaShape":
        return BetaShape(self.mu * self.phi, (1.0 - self.mu) * self.phi)


@dataclass(frozen=True)
class BetaShape:
    a: float
    b: float

    def __post_init__(self):
        for name, v in (("a", self.a), ("b", self.b)):
            if not (math.isfinite(v) and v > 0.0):
                raise DomainError(f"{name} must be positive and finite, got {v}")

    def to_mean_precision(self) -> BetaMeanPrecision:
        phi = self.a + self.b
        return BetaMeanPrecision(self.a / phi, phi)


@dataclass(frozen=True)
class ZeroInflatedParams:
    """Point mass ``lambda_zero`` at 0 mixed with a Beta on (0, 1)."""

    lambda_zero: float
    beta: BetaMeanPrecision

    def __post_init__(self):
        if not (0.0 <= self.lambda_zero <= 1.0):
            raise DomainError(f"lambda_zero must lie in [0, 1], got {self.lambda_zero}")


def beta_log_pdf(y, params: BetaMeanPrecision):
    """Log density of the Beta distribution in mean/precision form.

    ``y`` may be a scalar (float result) or an array of points.
    """
    arr = np.asarray(y, dtype=np.float64)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise DomainError(f"y must lie in (0, 1), got {y}")
    mu, phi = params.mu, params.phi
    a, b = mu * phi, (1.0 - mu) * phi
    norm = ln_gamma(phi) - ln_gamma(a) - ln_gamma(b)
    out = norm + (a - 1.0) * np.log(arr) + (b - 1.0) * np.log1p(-arr)
    return float(out) if out.ndim == 0 else out


def beta_variance(params: BetaMeanPrecision) -> float:
    return params.mu * (1.0 - params.mu) / (1.0 + params.phi)


def zero_inflated_log_likelihood(y: float, params: ZeroInflatedParams) -> float:
    """Log-likelihood of one observation under the zero-inflated Beta.

    ``y == 0`` scores the point mass, anything else scores the continuous
    branch after clamping into ``[1e-6, 1 - 1e-6]``.
    """
    if not (0.0 <= y < 1.0):
        raise DomainError(f"y must lie in [0, 1), got {y}")
    lam = params.lambda_zero
    if y == 0.0:
        return math.log(lam) if lam > 0.0 else -math.inf
    if lam >= 1.0:
        return -math.inf
    yc = min(max(y, Y_CLAMP), 1.0 - Y_CLAMP)
    return math.log1p(-lam) + beta_log_pdf(yc, params.beta)


def _trigamma(x: float) -> float:
    # Only used for the Newton Hessian below.
    acc = 0.0
    while x < 10.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (
        1.0 / 6.0
        - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)))
    )
    return acc + inv + 0.5 * inv2 + series * inv


def fit_phi_mle(
    samples,
    max_iter: int = 200,
    gtol: float = 1e-8,
    return_shape: bool = False,
):
    """Estimate the Beta precision ``phi = a + b`` by maximum likelihood.

    Newton iterations run on ``(log a, log b)`` with a backtracking line
    search, starting from the method-of-moments solution.  Convergence is
    declared when the gradient of the mean log-likelihood (in log
    coordinates) has norm at most ``gtol``.

    Parameters
    ----------
    samples : array_like
        At least 10 observations, each strictly inside (0, 1).
    return_shape : bool
        Return the fitted :class:`BetaShape` instead of ``a + b``.

    Raises
    ------
    ValueError
        Too few samples, samples outside (0, 1), or all samples equal
        (precision diverges).
    """
    y = np.asarray(samples, dtype=np.float64).ravel()
    if y.size < 10:
        raise ValueError(f"need at least 10 samples, got {y.size}")
    if not np.all((y > 0.0) & (y < 1.0)):
        raise ValueError("samples must lie strictly inside (0, 1)")
    if np.ptp(y) == 0.0:
        raise ValueError("precision diverges: all samples are equal")

    s1 = float(np.mean(np.log(y)))
    s2 = float(np.mean(np.log1p(-y)))

    def loglik(a, b):
        return ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * s1 + (b - 1.0) * s2

    m = float(y.mean())
    v = float(y.var())
    common = m * (1.0 - m) / v - 1.0
    if common <= 0.0:
        common = 1.0
    theta = np.log([m * common, (1.0 - m) * common])

    for _ in range(max_iter):
        a, b = np.exp(theta)
        psi_ab = digamma(a + b)
        ga = psi_ab - digamma(a) + s1
        gb = psi_ab - digamma(b) + s2
        grad = np.array([a * ga, b * gb])
        if np.linalg.norm(grad) <= gtol:
            break
        t_ab = _trigamma(a + b)
        haa = a * ga + a * a * (t_ab - _trigamma(a))
        hbb = b * gb + b * b * (t_ab - _trigamma(b))
        hab = a * b * t_ab
        hess = np.array([[haa, hab], [hab, hbb]])
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad
        if step @ grad <= 0.0:
            # Hessian not negative definite here: fall back to ascent.
            step = grad
        f0 = loglik(a, b)
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            a1, b1 = np.exp(cand)
            if loglik(a1, b1) >= f0 + 1e-4 * t * (step @ grad):
                break
            t *= 0.5
        theta = cand

    a, b = (float(v) for v in np.exp(theta))
    if return_shape:
        return BetaShape(a, b)
    return a + b
