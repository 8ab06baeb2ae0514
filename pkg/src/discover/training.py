"""Alternating max-min training with early stopping.

Each step runs one forward pass with the current parameters, updates the
adversary on its cross-entropy (encoders/decoders held fixed), then updates
the encoders/decoders against the freshly updated adversary.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import batches
from .distributions import kl_to_standard_normal, reparam_sample
from .model import (
    ConditionalVAENet,
    DiscoverNet,
    PlainVAENet,
    estimate_class_means,
    restore,
    snapshot,
)
from .objective import (
    LossWeights,
    adversarial_ce,
    loss_w,
    loss_z,
    reconstruction_loglik,
    total_loss,
)
from .optim import AdamW, clip_grad_norm

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainOptions:
    lr: float = 1e-3
    lr_adv: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    batch_size: int = 128
    patience: int = 50
    max_epochs: int = 1000
    clip_grad_norm: float | None = None
    adv_steps: int = 1
    detach_prior_means: bool = False
    prior_momentum: float = 0.9
    divergence_threshold: float = 1e6
    divergence_epochs: int = 10


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    rec: float
    rec_z: float
    kl_z: float
    kl_w: float
    adv: float
    val_loss: float
    val_objective: float
    val_nll: float
    adv_acc: float
    skipped_steps: int


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stop_reason: str = ""
    skipped_steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path: str | Path) -> None:
        cols = list(EpochRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for rec in self.epochs:
                writer.writerow([_fmt(getattr(rec, c)) for c in cols])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


# -- forward passes -------------------------------------------------------------------


@dataclass
class StepState:
    """Running class means of z kept between steps."""

    running_means: np.ndarray | None = None
    momentum: float = 0.9

    def update(self, batch_means: np.ndarray, counts: np.ndarray) -> None:
        if self.running_means is None:
            self.running_means = batch_means.copy()
            return
        present = counts > 0
        m = self.momentum
        self.running_means[present] = m * self.running_means[present] + (1 - m) * batch_means[present]


def forward(model, x, y, eps_z, eps_w=None, step_state: StepState | None = None,
            detach_prior_means: bool = False) -> tuple[dict[str, Tensor], Tensor | None]:
    """Loss components for one batch and the z-only reconstruction (adversary input).

    For the baselines the adversary input is ``None`` and only the terms the
    model defines are returned.
    """
    if isinstance(model, DiscoverNet):
        theta_z = model.encode_z(x)
        theta_w = model.encode_w(x, y)
        z = reparam_sample(theta_z, eps_z)
        w = reparam_sample(theta_w, eps_w)
        x_hat_logits = model.decode_z_logits(z)
        rec_z = reconstruction_loglik(x, x_hat_logits, model.likelihood).mean()
        running = None if step_state is None else step_state.running_means
        prior = estimate_class_means(z, y, model.n_classes, running, detach_prior_means)
        if step_state is not None:
            step_state.update(prior.mu_k.data, prior.counts)
        rec, kl_z, kl_w = loss_w(theta_z, theta_w, z, w, x, y, model, prior)
        x_hat = model.decoder_output(x_hat_logits)
        return {"rec": rec, "rec_z": rec_z, "kl_z": kl_z, "kl_w": kl_w}, x_hat
    if isinstance(model, PlainVAENet):
        theta_z = model.encode_z(x)
        z = reparam_sample(theta_z, eps_z)
        rec_z, kl_z = loss_z(theta_z, z, x, model)
        return {"rec_z": rec_z, "kl_z": kl_z}, None
    if isinstance(model, ConditionalVAENet):
        theta_z = model.encode_z(x, y)
        z = reparam_sample(theta_z, eps_z)
        rec = reconstruction_loglik(x, model.decode_zy_logits(z, y), model.likelihood).mean()
        return {"rec": rec, "kl_z": kl_to_standard_normal(theta_z).mean()}, None
    raise TypeError(f"unsupported model type {type(model).__name__}")


def model_weights(model, weights: LossWeights) -> LossWeights:
    """Weights actually applied for ``model``: baselines optimise their plain ELBO."""
    if isinstance(model, DiscoverNet):
        return weights
    if isinstance(model, PlainVAENet):
        return LossWeights(rec=0.0, kl_z=1.0, kl_w=0.0, adv=0.0, rec_z=1.0)
    if isinstance(model, ConditionalVAENet):
        return LossWeights(rec=1.0, kl_z=1.0, kl_w=0.0, adv=0.0, rec_z=0.0)
    raise TypeError(f"unsupported model type {type(model).__name__}")


# -- optimisation ---------------------------------------------------------------------


class Trainer:
    """Owns the two optimizers and applies alternating adversary/model steps."""

    def __init__(self, model, weights: LossWeights, opts: TrainOptions):
        self.model = model
        self.weights = model_weights(model, weights)
        self.opts = opts
        groups = model.groups
        self.omega = [p for name, ps in groups.items() if name != "beta" for p in ps]
        self.beta = list(groups.get("beta", []))
        betas = (opts.beta1, opts.beta2)
        self.opt_omega = AdamW(self.omega, opts.lr, betas, opts.eps, opts.weight_decay)
        self.opt_beta = (
            AdamW(self.beta, opts.lr if opts.lr_adv is None else opts.lr_adv, betas, opts.eps,
                  opts.weight_decay)
            if self.beta
            else None
        )
        self.step_state = StepState(momentum=opts.prior_momentum)
        self.skipped = 0

    def _draw_noise(self, rng: np.random.Generator, n: int):
        d = self.model.d_latent
        eps_z = rng.standard_normal((n, d), dtype=np.float32)
        eps_w = rng.standard_normal((n, d), dtype=np.float32)
        return eps_z, eps_w

    def train_step(self, x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> dict:
        """One alternating update; returns floats for logging.

        The returned ``adv`` is the cross-entropy of the updated adversary,
        i.e. the value entering the encoder/decoder step.
        """
        model, opts = self.model, self.opts
        eps_z, eps_w = self._draw_noise(rng, x.shape[0])
        tape = ad.get_tape()
        tape.reset()
        comps, x_hat = forward(model, x, y, eps_z, eps_w, self.step_state, opts.detach_prior_means)
        metrics: dict[str, float] = {k: v.item() for k, v in comps.items()}
        if not all(math.isfinite(v) for v in metrics.values()):
            return self._skip(metrics)

        if x_hat is not None and self.opt_beta is not None:
            x_hat_fixed = x_hat.detach()
            for _ in range(opts.adv_steps):
                self.opt_beta.zero_grad()
                ce_beta = adversarial_ce(model, x_hat_fixed, y)
                metrics["adv_before"] = ce_beta.item()
                if not math.isfinite(metrics["adv_before"]):
                    return self._skip(metrics)
                ad.backward(ce_beta, retain_graph=True)
                if opts.clip_grad_norm and math.isnan(clip_grad_norm(self.beta, opts.clip_grad_norm)):
                    return self._skip(metrics)
                self.opt_beta.step()
            comps["adv"] = adversarial_ce(model, x_hat, y)

        loss = total_loss(comps, self.weights)
        metrics.update({k: v.item() for k, v in comps.items()})
        metrics["loss"] = loss.item()
        if not math.isfinite(metrics["loss"]):
            return self._skip(metrics)
        self.opt_omega.zero_grad()
        for p in self.beta:
            p.requires_grad = False
        try:
            ad.backward(loss)
        finally:
            for p in self.beta:
                p.requires_grad = True
        if opts.clip_grad_norm and math.isnan(clip_grad_norm(self.omega, opts.clip_grad_norm)):
            return self._skip(metrics)
        self.opt_omega.step()
        if x_hat is not None:
            logp = model.classify_reconstruction(x_hat.detach())
            metrics["adv_acc"] = float(np.mean(np.argmax(logp.data, axis=1) == y))
        return metrics

    def _skip(self, metrics: dict) -> dict:
        ad.get_tape().reset()
        self.skipped += 1
        logger.warning("non-finite loss; skipping step (%d skipped so far)", self.skipped)
        metrics["skipped"] = 1
        return metrics

    def evaluate(self, x: np.ndarray, y: np.ndarray, eps_z: np.ndarray, eps_w: np.ndarray,
                 batch_size: int = 4096) -> dict:
        """Components on held-out data with fixed noise.

        ``loss`` is the weighted objective without the adversarial term (the
        early-stopping criterion); ``objective`` includes it. The adversarial
        cross-entropy depends on the current adversary rather than on model
        quality alone, so an untrained adversary can make the full objective
        look spuriously good.
        """
        model = self.model
        sums: dict[str, float] = {}
        n = x.shape[0]
        with ad.no_grad():
            for start in range(0, n, batch_size):
                sl = slice(start, start + batch_size)
                running = self.step_state.running_means
                state = StepState(None if running is None else running.copy())
                comps, x_hat = forward(model, x[sl], y[sl], eps_z[sl], eps_w[sl], state)
                vals = {k: v.item() for k, v in comps.items()}
                if x_hat is not None:
                    vals["adv"] = adversarial_ce(model, x_hat, y[sl]).item()
                    logp = model.classify_reconstruction(x_hat)
                    vals["adv_acc"] = float(np.mean(np.argmax(logp.data, axis=1) == y[sl]))
                vals["objective"] = total_loss(vals, self.weights).item()
                vals["loss"] = total_loss(vals, replace(self.weights, adv=0.0)).item()
                rec = vals["rec"] if "rec" in vals else vals["rec_z"]
                vals["nll"] = -rec + vals.get("kl_z", 0.0) + vals.get("kl_w", 0.0)
                m = x[sl].shape[0]
                for k, v in vals.items():
                    sums[k] = sums.get(k, 0.0) + v * m
        return {k: v / n for k, v in sums.items()}


def finalize_prior_means(model, x: np.ndarray, y: np.ndarray, batch_size: int = 4096) -> None:
    """Set the stored class means to the class averages of E_q[z] over ``x``."""
    if not isinstance(model, DiscoverNet):
        return
    with ad.no_grad():
        mu = np.concatenate(
            [model.encode_z(x[s:s + batch_size]).mu.data for s in range(0, x.shape[0], batch_size)]
        )
    for k in range(model.n_classes):
        mask = y == k
        model.prior_means[k] = mu[mask].mean(axis=0) if mask.any() else mu.mean(axis=0)


def fit(model, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
        weights: LossWeights, opts: TrainOptions, rng: np.random.Generator,
        epoch_callback=None) -> TrainReport:
    """Train until validation loss stops improving; restores the best parameters."""
    x_tr, y_tr = train
    x_val, y_val = val
    trainer = Trainer(model, weights, opts)
    report = TrainReport()
    d = model.d_latent
    val_rng = np.random.default_rng(rng.integers(2**63))
    val_eps_z = val_rng.standard_normal((x_val.shape[0], d), dtype=np.float32)
    val_eps_w = val_rng.standard_normal((x_val.shape[0], d), dtype=np.float32)

    best = None
    wait = 0
    diverged = 0
    for epoch in range(opts.max_epochs):
        sums: dict[str, float] = {}
        count = 0
        skipped_before = trainer.skipped
        for idx in batches(x_tr.shape[0], opts.batch_size, rng):
            m = trainer.train_step(x_tr[idx], y_tr[idx], rng)
            if m.get("skipped"):
                continue
            for k in ("loss", "rec", "rec_z", "kl_z", "kl_w", "adv"):
                sums[k] = sums.get(k, 0.0) + m.get(k, 0.0) * len(idx)
            count += len(idx)
        avg = {k: v / max(count, 1) for k, v in sums.items()}
        val_metrics = trainer.evaluate(x_val, y_val, val_eps_z, val_eps_w)
        rec = EpochRecord(
            epoch=epoch,
            loss=avg.get("loss", math.nan),
            rec=avg.get("rec", 0.0),
            rec_z=avg.get("rec_z", 0.0),
            kl_z=avg.get("kl_z", 0.0),
            kl_w=avg.get("kl_w", 0.0),
            adv=avg.get("adv", 0.0),
            val_loss=val_metrics["loss"],
            val_objective=val_metrics["objective"],
            val_nll=val_metrics["nll"],
            adv_acc=val_metrics.get("adv_acc", math.nan),
            skipped_steps=trainer.skipped - skipped_before,
        )
        report.epochs.append(rec)
        report.epochs_run = epoch + 1
        if epoch_callback is not None:
            epoch_callback(rec)

        if not (rec.val_loss < opts.divergence_threshold and math.isfinite(rec.val_loss)):
            diverged += 1
            if diverged >= opts.divergence_epochs:
                report.stop_reason = "diverged"
                report.skipped_steps = trainer.skipped
                raise DivergenceError(f"loss above {opts.divergence_threshold} for "
                                      f"{diverged} epochs", report)
        else:
            diverged = 0

        if rec.val_loss < report.best_val_loss:
            report.best_val_loss = rec.val_loss
            report.best_epoch = epoch
            best = snapshot(model)
            wait = 0
        else:
            wait += 1
            if wait >= max(opts.patience, 1):
                report.stop_reason = "early_stopping"
                break
    else:
        report.stop_reason = "max_epochs"

    if best is not None:
        restore(model, best)
    report.skipped_steps = trainer.skipped
    finalize_prior_means(model, x_tr, y_tr)
    return report
