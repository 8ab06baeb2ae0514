"""Loss terms of the dual-latent objective and the linear-Gaussian gap testbed.

All batch terms are per-sample means. ``total_loss`` returns the quantity the
encoders/decoders *minimise*, i.e. the negated weighted objective

    w_rec_z * rec_z + w_rec * rec_joint - a1 * KL_z - a2 * KL_w + w_adv * CE

where CE is the adversary's cross-entropy on the z-only reconstruction.
Encoders maximise CE; the adversary minimises it in its own step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    DiagGaussian,
    LOG_2PI,
    kl_to_standard_normal,
    kl_to_unit_variance,
    logprob_unit_gaussian,
)
from .model import PriorMeans, one_hot


@dataclass
class LossWeights:
    rec: float = 1.0
    kl_z: float = 1.0
    kl_w: float = 1.0
    adv: float = 1.0
    rec_z: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


def reconstruction_loglik(x, logits: Tensor, likelihood: str) -> Tensor:
    """Per-sample log p(x | decoder output)."""
    x = ad.tensor(x)
    if likelihood == "gaussian":
        return logprob_unit_gaussian(logits, x)
    if likelihood == "bernoulli":
        terms = x * logits - ad.softplus(logits)
        return terms.sum(axis=1)
    raise ValueError(f"unknown likelihood {likelihood!r}")


def reconstruction_loglik_np(x: np.ndarray, logits: np.ndarray, likelihood: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if likelihood == "gaussian":
        return -0.5 * ((x - logits) ** 2 + LOG_2PI).sum(axis=1)
    return (x * logits - np.logaddexp(0.0, logits)).sum(axis=1)


def loss_z(theta_z: DiagGaussian, z_sample: Tensor, x, model) -> tuple[Tensor, Tensor]:
    """(E_q log p(x|z), KL(q(z|x) || N(0, I))), batch means, one MC sample."""
    logits = model.decode_z_logits(z_sample)
    rec = reconstruction_loglik(x, logits, model.likelihood).mean()
    return rec, kl_to_standard_normal(theta_z).mean()


def loss_w(
    theta_z: DiagGaussian,
    theta_w: DiagGaussian,
    z_sample: Tensor,
    w_sample: Tensor,
    x,
    y,
    model,
    prior: PriorMeans,
) -> tuple[Tensor, Tensor, Tensor]:
    """(E log p(x|z,w), KL(q_z || N(0,I)), KL(q_w || N(mu_y, I))), batch means."""
    logits = model.decode_zw_logits(z_sample, w_sample)
    rec = reconstruction_loglik(x, logits, model.likelihood).mean()
    kl_z = kl_to_standard_normal(theta_z).mean()
    kl_w = kl_to_unit_variance(theta_w, prior.for_labels(y)).mean()
    return rec, kl_z, kl_w


def adversarial_ce(model, x_hat, y) -> Tensor:
    """Mean cross-entropy of the adversary's prediction of y from x-hat."""
    logp = model.classify_reconstruction(x_hat)
    onehot = one_hot(np.asarray(y), model.n_classes)
    return -(logp * onehot).sum(axis=1).mean()


COMPONENTS = ("rec", "rec_z", "kl_z", "kl_w", "adv")


def total_loss(components: dict[str, Tensor | float], weights: LossWeights) -> Tensor:
    """Negated weighted objective; absent components count as zero."""
    get = lambda k: components.get(k, 0.0)  # noqa: E731
    objective = (
        weights.rec_z * get("rec_z")
        + weights.rec * get("rec")
        - weights.kl_z * get("kl_z")
        - weights.kl_w * get("kl_w")
        + weights.adv * get("adv")
    )
    return -ad.tensor(objective) if not isinstance(objective, Tensor) else -objective


# -- linear-Gaussian gap testbed----------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianProblem:
    """x = z + w + noise with z ~ N(0, I), w | y ~ N(mu_y, I), noise ~ N(0, obs_var I).

    Every posterior is Gaussian, so each side of the ELBO gap identity has a
    closed form or a low-variance Monte Carlo form.
    """

    x: np.ndarray
    mu_y: np.ndarray
    obs_var: float = 0.5

    def log_evidence(self) -> float:
        """log p(x | y): x | y ~ N(mu_y, (2 + obs_var) I)."""
        v = 2.0 + self.obs_var
        return float(np.sum(-0.5 * (LOG_2PI + math.log(v) + (self.x - self.mu_y) ** 2 / v)))

    def w_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        """p(w | x, y): prior N(mu_y, 1), likelihood x | w ~ N(w, 1 + obs_var)."""
        s = 1.0 + self.obs_var
        var = 1.0 / (1.0 + 1.0 / s)
        mean = var * (self.mu_y + self.x / s)
        return mean, np.full_like(mean, var)

    def z_posterior(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """p(z | w, x, y) for each row of ``w``."""
        var = 1.0 / (1.0 + 1.0 / self.obs_var)
        mean = var * (self.x - w) / self.obs_var
        return mean, np.full_like(mean, var)


def _kl_np(mq, vq, mp, vp):
    return 0.5 * np.sum(np.log(vp / vq) + (vq + (mq - mp) ** 2) / vp - 1.0, axis=-1)


@dataclass
class GapCheck:
    lhs: float
    rhs: float
    abs_diff: float
    se: float


def verify_elbo_gap(
    problem: LinearGaussianProblem,
    q_z: tuple[np.ndarray, np.ndarray],
    q_w: tuple[np.ndarray, np.ndarray],
    n_samples: int,
    rng: np.random.Generator,
) -> GapCheck:
    """Evaluate both sides of  ELBO(q,p;x,y) - L_w = E_{q_w} KL(q_z || p(z|w,x,y)).

    Left side: log p(x|y) - KL(q_w || p(w|x,y)) minus a Monte Carlo L_w whose
    reconstruction term uses joint samples of (z, w). Right side: Monte Carlo
    over fresh w samples of the closed-form conditional KL.
    """
    mz, vz = (np.asarray(a, dtype=np.float64) for a in q_z)
    mw, vw = (np.asarray(a, dtype=np.float64) for a in q_w)
    x, mu_y, s = problem.x, problem.mu_y, problem.obs_var
    d = x.shape[-1]

    pw_mean, pw_var = problem.w_posterior()
    elbo = problem.log_evidence() - _kl_np(mw, vw, pw_mean, pw_var)

    z = mz + np.sqrt(vz) * rng.standard_normal((n_samples, d))
    w = mw + np.sqrt(vw) * rng.standard_normal((n_samples, d))
    loglik = np.sum(-0.5 * (LOG_2PI + math.log(s) + (x - z - w) ** 2 / s), axis=1)
    kl_z = _kl_np(mz, vz, np.zeros(d), np.ones(d))
    kl_w = _kl_np(mw, vw, mu_y, np.ones(d))
    lhs_samples = elbo - (loglik - kl_z - kl_w)

    w2 = mw + np.sqrt(vw) * rng.standard_normal((n_samples, d))
    pz_mean, pz_var = problem.z_posterior(w2)
    rhs_samples = _kl_np(mz, vz, pz_mean, pz_var)

    lhs, rhs = float(lhs_samples.mean()), float(rhs_samples.mean())
    se = math.sqrt(lhs_samples.var(ddof=1) / n_samples + rhs_samples.var(ddof=1) / n_samples)
    return GapCheck(lhs, rhs, abs(lhs - rhs), se)
