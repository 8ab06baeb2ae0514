"""Evaluation metrics: likelihood bounds, KL to analytic posteriors, the
Bayes-deviation probe, neural mutual-information estimation and marginal
reconstruction error.

All functions are deterministic given their inputs and an explicit seed.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp
from sklearn.model_selection import train_test_split
from sklearn.naive_bayes import GaussianNB

from . import autodiff as ad
from .autodiff import ContractError
from .distributions import LOG_2PI, kl_gaussian_to_truncated_quad
from .model import ConditionalVAENet, DiscoverNet, MLP, PlainVAENet, one_hot
from .objective import reconstruction_loglik_np
from .optim import AdamW

logger = logging.getLogger(__name__)

EVAL_BATCH = 4096


class UnsupportedMetricError(ValueError):
    """The requested metric is undefined for this model or dataset."""


@dataclass
class EvalReport:
    nll: float = math.nan
    nll_se: float = math.nan
    kl_z: float = math.nan
    kl_w: float = math.nan
    delta_bayes: float = math.nan
    delta_bayes_se: float = math.nan
    mi_zw: float = math.nan
    marginal_rmse: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        for k, v in asdict(self).items():
            if isinstance(v, float) and not math.isnan(v) and not math.isfinite(v):
                raise ContractError(f"metric {k} is not finite: {v}")
        if not math.isnan(self.delta_bayes) and self.delta_bayes < 0:
            raise ContractError("delta_bayes must be non-negative")


# -- helpers ------------------------------------------------------------------------


def _in_batches(fn, *arrays, batch_size=EVAL_BATCH):
    n = arrays[0].shape[0]
    outs = []
    with ad.no_grad():
        for s in range(0, n, batch_size):
            outs.append(fn(*(a[s:s + batch_size] for a in arrays)))
    if isinstance(outs[0], tuple):
        return tuple(np.concatenate(parts) for parts in zip(*outs))
    return np.concatenate(outs)


def posterior_params(model, x, y):
    """(mu_z, var_z, mu_w, var_w) as float64 arrays; w entries are None when
    the model has no condition-aware latent."""
    x = np.asarray(x, dtype=np.float32)
    if isinstance(model, ConditionalVAENet):
        mz, vz = _in_batches(lambda a, b: _mv(model.encode_z(a, b)), x, y)
        return mz, vz, None, None
    mz, vz = _in_batches(lambda a: _mv(model.encode_z(a)), x)
    if isinstance(model, DiscoverNet):
        mw, vw = _in_batches(lambda a, b: _mv(model.encode_w(a, b)), x, y)
        return mz, vz, mw, vw
    return mz, vz, None, None


def _mv(q):
    return q.mu.data.astype(np.float64), q.var.data.astype(np.float64)


def _log_normal(v, mu, var):
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (v - mu) ** 2 / var, axis=-1)


def reconstruct(model, x, y, use_mean: bool = True) -> dict[str, np.ndarray]:
    """Decoder outputs from posterior means: ``x_hat`` (z only) and, where
    defined, ``x_tilde`` (z and w, or z and y for the conditional baseline)."""
    mz, _, mw, _ = posterior_params(model, x, y)
    out = {}
    if isinstance(model, ConditionalVAENet):
        out["x_tilde"] = _in_batches(
            lambda a, b: model.decode_zy(a.astype(np.float32), b).data, mz, y)
        return out
    out["x_hat"] = _in_batches(lambda a: model.decode_z(a.astype(np.float32)).data, mz)
    if isinstance(model, DiscoverNet):
        out["x_tilde"] = _in_batches(
            lambda a, b: model.decode_zw(a.astype(np.float32), b.astype(np.float32)).data, mz, mw)
    return out


# -- NLL ------------------------------------------------------------------------------


def eval_nll(model, x, y, n_importance_samples: int = 1, seed: int = 0,
             return_per_sample: bool = False):
    """Per-datum negative log-likelihood bound in nats, with its standard error.

    For the dual-latent model this bounds -log p(x | y) through the joint
    path with the stored class prior means; with more than one sample the
    bound is the importance-weighted one. The plain VAE bounds -log p(x), the
    conditional VAE -log p(x | y).
    """
    if n_importance_samples < 1:
        raise ContractError("n_importance_samples must be >= 1")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    mz, vz, mw, vw = posterior_params(model, x, y)
    n, d = mz.shape
    K = n_importance_samples
    logw = np.empty((n, K))
    with ad.no_grad():
        for k in range(K):
            ez = rng.standard_normal((n, d))
            z = mz + np.sqrt(vz) * ez
            log_q = _log_normal(z, mz, vz)
            log_p = _log_normal(z, 0.0, 1.0)
            if isinstance(model, DiscoverNet):
                ew = rng.standard_normal((n, d))
                w = mw + np.sqrt(vw) * ew
                log_q = log_q + _log_normal(w, mw, vw)
                log_p = log_p + _log_normal(w, model.prior_means[y].astype(np.float64), 1.0)
                logits = _in_batches(lambda a, b: model.decode_zw_logits(
                    a.astype(np.float32), b.astype(np.float32)).data, z, w)
            elif isinstance(model, PlainVAENet):
                logits = _in_batches(lambda a: model.decode_z_logits(a.astype(np.float32)).data, z)
            else:
                logits = _in_batches(lambda a, b: model.decode_zy_logits(
                    a.astype(np.float32), b).data, z, y)
            log_lik = reconstruction_loglik_np(x, logits, model.likelihood)
            logw[:, k] = log_lik + log_p - log_q
    per_sample = -(logsumexp(logw, axis=1) - math.log(K))
    mean = float(per_sample.mean())
    se = float(per_sample.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    if return_per_sample:
        return mean, se, per_sample
    return mean, se


# -- analytic posteriors (parametric data) -----------------------------------------------


def latent_orientation(model, x) -> float:
    """+1 or -1 so that the oriented mean of z increases with x.

    The dual-latent model is invariant under the joint reflection
    (z, w) -> (-z, -w) (decoders and prior means flip with it), so its latents
    are only identified up to this sign.
    """
    x = np.asarray(x, dtype=np.float32)
    mz = _in_batches(lambda a: model.encode_z(a).mu.data.astype(np.float64), x)
    c = np.cov(mz[:, 0], x[:, 0])[0, 1]
    return 1.0 if c >= 0 else -1.0


def eval_kl_analytic_parametric(model, x, y, dataset_kind: str = "parametric",
                                n_points: int = 2001, orient: bool = True) -> dict:
    """KL of the encoders against the exact posteriors of the parametric model.

    ``kl_z``: KL(q(z|x) || N(x/2, 1/2)) in closed form. ``kl_w``: KL(q(w|x,y) ||
    p(w|x,y)) against the truncated Gaussians by quadrature; the average over
    the data is label-frequency weighted, and both conditionals are reported.
    Values are raw nats; ``*_x100`` columns are scaled by 100.
    """
    if dataset_kind != "parametric":
        raise UnsupportedMetricError(f"analytic posteriors exist only for parametric data, "
                                     f"not {dataset_kind!r}")
    if model.n_features != 1 or model.d_latent != 1:
        raise UnsupportedMetricError("analytic posteriors need 1-D data and 1-D latents")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    sign = latent_orientation(model, x) if orient else 1.0
    mz, vz, mw, vw = posterior_params(model, x, y)
    xd = x[:, 0].astype(np.float64)
    m = sign * mz[:, 0]
    v = vz[:, 0]
    kl_z = 0.5 * (np.log(0.5 / v) + (v + (m - xd / 2) ** 2) / 0.5 - 1.0)
    out = {"kl_z": float(kl_z.mean()), "kl_z_x100": 100 * float(kl_z.mean()),
           "orientation": sign, "kl_z_per_sample": kl_z}
    if mw is not None:
        kl_w = kl_gaussian_to_truncated_quad(sign * mw[:, 0], vw[:, 0], xd / 2, 0.5, y == 1,
                                             n_points=n_points)
        out.update({
            "kl_w": float(kl_w.mean()), "kl_w_x100": 100 * float(kl_w.mean()),
            "kl_w_y0": float(kl_w[y == 0].mean()) if np.any(y == 0) else math.nan,
            "kl_w_y1": float(kl_w[y == 1].mean()) if np.any(y == 1) else math.nan,
            "kl_w_per_sample": kl_w,
        })
    return out


# -- Bayes deviation ---------------------------------------------------------------------


def nb_accuracy(features, y, seed: int = 0, test_size: float = 0.3) -> tuple[float, float]:
    """Held-out accuracy (and its binomial standard error) of Gaussian naive
    Bayes on a fixed-seed stratified split."""
    features = np.asarray(features, dtype=np.float64)
    y = np.asarray(y)
    if np.unique(y).size < 2:
        raise ContractError("naive Bayes probe needs at least two classes")
    if features.ndim == 1:
        features = features[:, None]
    x_tr, x_te, y_tr, y_te = train_test_split(features, y, test_size=test_size,
                                              random_state=seed, stratify=y)
    acc = float(GaussianNB().fit(x_tr, y_tr).score(x_te, y_te))
    return acc, math.sqrt(acc * (1 - acc) / len(y_te))


def delta_bayes(model, x, y, bayes_optimal_accuracy: float, seed: int = 0,
                features: str = "reconstruction") -> tuple[float, float]:
    """|probe accuracy - Bayes accuracy| x 100 with its standard error.

    ``features='reconstruction'`` probes the full reconstruction from
    posterior means; ``'latent'`` probes the mean of w instead.
    """
    if features == "reconstruction":
        rec = reconstruct(model, x, y)
        if "x_tilde" not in rec:
            raise UnsupportedMetricError("model has no full reconstruction")
        feats = rec["x_tilde"]
    elif features == "latent":
        _, _, mw, _ = posterior_params(model, x, y)
        if mw is None:
            raise UnsupportedMetricError("model has no condition-aware latent")
        feats = mw
    else:
        raise ValueError(f"unknown feature set {features!r}")
    acc, se = nb_accuracy(feats, y, seed)
    return 100 * abs(acc - bayes_optimal_accuracy), 100 * se


# -- MINE -----------------------------------------------------------------------------


@dataclass
class MineConfig:
    hidden: int = 128
    n_hidden: int = 2
    epochs: int = 500
    batch_size: int = 512
    lr: float = 1e-4
    ema_momentum: float = 0.99
    holdout: float = 0.3
    seed: int = 0


class MineEstimator:
    """Donsker-Varadhan estimator of I(z; w) with a bias-corrected gradient.

    The statistic network is trained on one split and the bound is evaluated
    on the other, so the reported value is not inflated by overfitting.
    """

    def __init__(self, config: MineConfig | None = None):
        self.config = config or MineConfig()
        self.net: MLP | None = None
        self.ema: float | None = None
        self.history: list[float] = []

    def _init(self, d_in: int, rng: np.random.Generator) -> None:
        c = self.config
        self.net = MLP(d_in, 1, c.n_hidden, c.hidden, rng, "mine", "relu")
        self.opt = AdamW(self.net.parameters(), c.lr, weight_decay=0.0)
        self.ema = None

    def statistic(self, z, w) -> np.ndarray:
        with ad.no_grad():
            return self.net(ad.tensor(np.concatenate([z, w], axis=1))).data[:, 0].astype(np.float64)

    def fit(self, z, w) -> "MineEstimator":
        c = self.config
        z, w = _as2d(z), _as2d(w)
        rng = np.random.default_rng([c.seed, 0x4D49])
        self._init(z.shape[1] + w.shape[1], rng)
        n = z.shape[0]
        tape = ad.get_tape()
        for _ in range(c.epochs):
            order = rng.permutation(n)
            for s in range(0, n, c.batch_size):
                idx = order[s:s + c.batch_size]
                if idx.size < 2:
                    continue
                zb, wb = z[idx], w[idx]
                wm = wb[rng.permutation(idx.size)]
                tape.reset()
                t_joint = self.net(ad.tensor(np.concatenate([zb, wb], axis=1)))
                t_marg = self.net(ad.tensor(np.concatenate([zb, wm], axis=1)))
                exp_m = ad.exp(t_marg)
                batch_mean = float(exp_m.data.mean())
                m = c.ema_momentum
                self.ema = batch_mean if self.ema is None else m * self.ema + (1 - m) * batch_mean
                # Surrogate whose gradient is -dE[T] + E[e^T dT] / ema.
                loss = -t_joint.mean() + exp_m.mean() * (1.0 / self.ema)
                self.opt.zero_grad()
                ad.backward(loss)
                self.opt.step()
        return self

    def estimate(self, z, w, n_shuffles: int = 10, seed: int = 0) -> float:
        """DV bound E_joint[T] - log E_marginal[exp T] on the given pairs."""
        z, w = _as2d(z), _as2d(w)
        rng = np.random.default_rng([seed, 0x5348])
        t_joint = self.statistic(z, w).mean()
        t_marg = np.concatenate([self.statistic(z, w[rng.permutation(len(w))])
                                 for _ in range(n_shuffles)])
        return float(t_joint - (logsumexp(t_marg) - math.log(t_marg.size)))


def _as2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    return a[:, None] if a.ndim == 1 else a


def mine_mi(z, w, config: MineConfig | None = None) -> dict:
    """Held-out MINE estimate; returns ``raw`` and ``clamped`` (at 0) nats."""
    config = config or MineConfig()
    z, w = _as2d(z), _as2d(w)
    if z.shape[0] != w.shape[0]:
        raise ContractError(f"z has {z.shape[0]} rows but w has {w.shape[0]}")
    if z.shape[0] < 1000:
        warnings.warn(f"MINE with {z.shape[0]} samples has a wide error bar", stacklevel=2)
    idx = np.random.default_rng([config.seed, 0x5350]).permutation(z.shape[0])
    n_hold = max(1, int(round(config.holdout * z.shape[0])))
    hold, train = idx[:n_hold], idx[n_hold:]
    est = MineEstimator(config).fit(z[train], w[train])
    raw = est.estimate(z[hold], w[hold], seed=config.seed)
    return {"raw": raw, "clamped": max(raw, 0.0)}


def mi_zw(model, x, y, config: MineConfig | None = None, use_means: bool = False,
          seed: int = 0) -> dict:
    """I(z; w) between one posterior sample of each latent per input.

    ``use_means=True`` uses the posterior means instead; two encoders that
    carry almost no information still produce means that are smooth functions
    of the same x, so that variant overstates the dependence.
    """
    if not isinstance(model, DiscoverNet):
        raise UnsupportedMetricError("I(z;w) needs a model with both latents")
    mz, vz, mw, vw = posterior_params(model, x, y)
    if not use_means:
        rng = np.random.default_rng([seed, 0x534D])
        mz = mz + np.sqrt(vz) * rng.standard_normal(mz.shape)
        mw = mw + np.sqrt(vw) * rng.standard_normal(mw.shape)
    return mine_mi(mz, mw, config)


# -- marginal reconstruction -----------------------------------------------------------


def rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)))


def marginal_rmse(model, x, y, true_marginal) -> float:
    """RMSE between the z-only reconstruction and the true label-marginal."""
    if isinstance(model, ConditionalVAENet):
        raise UnsupportedMetricError("the conditional VAE has no z-only reconstruction; "
                                     "use conditional_marginal_rmse")
    return rmse(reconstruct(model, x, y)["x_hat"], true_marginal)


def conditional_marginal_rmse(model: ConditionalVAENet, x, y, true_marginal) -> float:
    """RMSE of the conditional VAE's marginal proxy: decoder outputs averaged
    over all labels at the encoder mean."""
    mz, _, _, _ = posterior_params(model, x, y)
    K = model.n_classes
    avg = 0.0
    for k in range(K):
        yk = np.full(len(mz), k)
        avg = avg + _in_batches(lambda a, b: model.decode_zy(a.astype(np.float32), b).data, mz, yk)
    return rmse(avg / K, true_marginal)


def class_conditional_baseline_rmse(grayscale: np.ndarray, noise_rate: float) -> float:
    """RMSE of the best label-conditioned reconstruction against the true marginal.

    For a digit with intensity d observed under label y, the optimal
    label-conditioned reconstruction mixes the two colourings with weights
    (1 - noise_rate, noise_rate); its red and green channels then miss the
    marginal d/2 by |0.5 - noise_rate| d, and blue is exact. Averaged over all
    pixels and channels this gives |0.5 - noise_rate| * sqrt(2/3 * mean(d^2)).
    """
    g = np.asarray(grayscale, dtype=np.float64)
    return abs(0.5 - noise_rate) * math.sqrt(2.0 / 3.0 * float(np.mean(g**2)))


def class_mean_baseline_rmse(x_train, y_train, x_eval, y_eval, true_marginal) -> float:
    """RMSE of predicting each input's class-average image."""
    means = {k: x_train[y_train == k].mean(axis=0) for k in np.unique(y_train)}
    pred = np.stack([means[k] for k in y_eval])
    return rmse(pred, true_marginal)
