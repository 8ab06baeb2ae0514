"""Diagonal Gaussians on the tape and 1-D truncated Gaussians in NumPy.

Functions taking :class:`DiagGaussian` accept tensors or plain arrays for the
parameters and always return tensors; batch dimensions lead, the event
dimension is last and is summed over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import erfc, log_ndtr

from . import autodiff as ad
from .autodiff import ContractError, Tensor

LOG_2PI = math.log(2 * math.pi)
VAR_FLOOR = 1e-6
OUT_OF_SUPPORT_LOGPDF = -30.0


@dataclass
class DiagGaussian:
    mu: Tensor
    var: Tensor

    def __post_init__(self):
        self.mu = ad.tensor(self.mu)
        self.var = ad.tensor(self.var)
        if self.mu.shape != self.var.shape:
            raise ContractError(f"mean shape {self.mu.shape} != variance shape {self.var.shape}")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        return cls(np.zeros(shape), np.ones(shape))


def _sum_event(t: Tensor) -> Tensor:
    return t.sum(axis=t.ndim - 1) if t.ndim > 0 else t


def kl_diag_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mu.shape[-1:] != p.mu.shape[-1:]:
        raise ContractError(f"dimension mismatch: {q.mu.shape} vs {p.mu.shape}")
    diff = q.mu - p.mu
    terms = ad.log(p.var) - ad.log(q.var) + (q.var + ad.square(diff)) / p.var - 1.0
    return _sum_event(terms) * 0.5


def kl_to_standard_normal(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)); same value as ``kl_diag_gaussians`` with fewer nodes."""
    terms = q.var + ad.square(q.mu) - ad.log(q.var) - 1.0
    return _sum_event(terms) * 0.5


def kl_to_unit_variance(q: DiagGaussian, prior_mu) -> Tensor:
    """KL(q || N(prior_mu, I))."""
    terms = q.var + ad.square(q.mu - prior_mu) - ad.log(q.var) - 1.0
    return _sum_event(terms) * 0.5


def logprob_diag_gaussian(q: DiagGaussian, x) -> Tensor:
    x = ad.tensor(x)
    if x.shape[-1:] != q.mu.shape[-1:]:
        raise ContractError(f"dimension mismatch: {x.shape} vs {q.mu.shape}")
    terms = ad.log(q.var) + ad.square(x - q.mu) / q.var + LOG_2PI
    return _sum_event(terms) * -0.5


def logprob_unit_gaussian(mean, x) -> Tensor:
    """log N(x; mean, I) summed over the last axis."""
    terms = ad.square(ad.tensor(x) - mean) + LOG_2PI
    return _sum_event(terms) * -0.5


def reparam_sample(q: DiagGaussian, eps) -> Tensor:
    """mu + sqrt(var) * eps, differentiable in mu and var."""
    eps = ad.tensor(eps)
    if eps.shape != q.mu.shape:
        raise ContractError(f"noise shape {eps.shape} != mean shape {q.mu.shape}")
    return q.mu + ad.sqrt(q.var) * eps


def positive_variance(raw: Tensor) -> Tensor:
    """Encoder variance head: softplus plus a small floor."""
    return ad.softplus(raw) + VAR_FLOOR


# -- truncated Gaussians (NumPy, float64) -----------------------------------------


def log_norm_cdf(x) -> np.ndarray:
    """log Phi(x), stable in both tails (scipy's ``log_ndtr``)."""
    return log_ndtr(np.asarray(x, dtype=np.float64))


def norm_cdf(x) -> np.ndarray:
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


@dataclass(frozen=True)
class TruncGaussian1D:
    """N(mu, var) restricted to w > 0 (``positive``) or w <= 0 (``negative``)."""

    mu: float
    var: float
    side: Literal["positive", "negative"]

    def __post_init__(self):
        if self.side not in ("positive", "negative"):
            raise ContractError(f"side must be 'positive' or 'negative', got {self.side!r}")
        if not self.var > 0:
            raise ContractError(f"variance must be positive, got {self.var}")

    @classmethod
    def parametric_posterior(cls, x: float, y: int) -> "TruncGaussian1D":
        """p(w | x, y) when x = z + w with z, w ~ N(0, 1) and y = [w > 0]."""
        return cls(x / 2.0, 0.5, "positive" if y == 1 else "negative")

    @property
    def log_normalizer(self) -> float:
        a = self.mu / math.sqrt(self.var)
        return float(log_norm_cdf(a if self.side == "positive" else -a))

    def in_support(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        return w > 0 if self.side == "positive" else w <= 0

    def logpdf(self, w) -> np.ndarray:
        return trunc_gaussian_logpdf(self, w)

    def pdf(self, w) -> np.ndarray:
        return np.exp(self.logpdf(w))


def trunc_gaussian_logpdf(t: TruncGaussian1D, w) -> np.ndarray:
    """Log density; -inf outside the support."""
    w = np.asarray(w, dtype=np.float64)
    base = -0.5 * (LOG_2PI + math.log(t.var) + (w - t.mu) ** 2 / t.var)
    out = base - t.log_normalizer
    return np.where(t.in_support(w), out, -np.inf)


def _capped_logpdf(t: TruncGaussian1D, w) -> np.ndarray:
    lp = trunc_gaussian_logpdf(t, w)
    return np.where(np.isfinite(lp), lp, OUT_OF_SUPPORT_LOGPDF)


def _gauss_logpdf(mu, var, w):
    return -0.5 * (LOG_2PI + np.log(var) + (w - mu) ** 2 / var)


def kl_gaussian_to_truncated(
    q_mu: float,
    q_var: float,
    t: TruncGaussian1D,
    n_samples: int,
    rng: np.random.Generator,
    return_se: bool = False,
):
    """Monte Carlo estimate of KL(q || t) with q = N(q_mu, q_var).

    Samples of q falling outside t's support are scored with a finite
    log-density cap instead of -inf.
    """
    if n_samples < 1000:
        raise ContractError(f"n_samples must be at least 1000, got {n_samples}")
    w = q_mu + math.sqrt(q_var) * rng.standard_normal(n_samples)
    vals = _gauss_logpdf(q_mu, q_var, w) - _capped_logpdf(t, w)
    est = float(vals.mean())
    if return_se:
        return est, float(vals.std(ddof=1) / math.sqrt(n_samples))
    return est


def kl_gaussian_to_truncated_quad(
    q_mu, q_var, t_mu, t_var, positive, n_points: int = 2001, width: float = 12.0
) -> np.ndarray:
    """Vectorised quadrature of KL(q || t) for batches of 1-D pairs.

    The integrand jumps at the truncation point, so the real line is split at
    0 and each piece is integrated with the trapezoid rule over
    ``q_mu +- width * q_sd``.
    """
    q_mu, q_var, t_mu, t_var, positive = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (q_mu, q_var, t_mu, t_var, positive))
    )
    q_mu, q_var, t_mu, t_var = (a.reshape(-1) for a in (q_mu, q_var, t_mu, t_var))
    pos = positive.reshape(-1).astype(bool)
    sd = np.sqrt(q_var)
    lo, hi = q_mu - width * sd, q_mu + width * sd
    a = t_mu / np.sqrt(t_var)
    log_z = np.where(pos, log_norm_cdf(a), log_norm_cdf(-a))

    u = np.linspace(0.0, 1.0, n_points)
    total = np.zeros_like(q_mu)
    for left, right, inside_if_pos in (
        (lo, np.minimum(hi, 0.0), False),
        (np.maximum(lo, 0.0), hi, True),
    ):
        span = np.maximum(right - left, 0.0)
        w = left[:, None] + span[:, None] * u[None, :]
        lq = _gauss_logpdf(q_mu[:, None], q_var[:, None], w)
        inside = (pos == inside_if_pos)[:, None]
        lt = np.where(
            inside,
            _gauss_logpdf(t_mu[:, None], t_var[:, None], w) - log_z[:, None],
            OUT_OF_SUPPORT_LOGPDF,
        )
        f = np.exp(lq) * (lq - lt)
        total += np.trapezoid(f, w, axis=1)
    return total
