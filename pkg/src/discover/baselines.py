"""Reference baselines sharing the dual-latent model's infrastructure."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .model import ConditionalVAENet, PlainVAENet, build_model


class BaselineKind(str, Enum):
    PLAIN_VAE = "plain_vae"
    CONDITIONAL_VAE = "conditional_vae"


def build_baseline(kind: BaselineKind | str, n_features: int, n_classes: int, d_latent: int,
                   n_hidden: int, d_hidden: int, rng: np.random.Generator,
                   likelihood: str = "gaussian", activation: str = "relu"
                   ) -> PlainVAENet | ConditionalVAENet:
    """A baseline with the same architecture knobs as the dual-latent model.

    The plain VAE has one latent and no label input; the conditional VAE feeds
    the one-hot label to both encoder and decoder. Neither has an adversary.
    """
    kind = BaselineKind(kind)
    if kind is BaselineKind.PLAIN_VAE:
        return build_model("plain_vae", n_features, n_classes, d_latent, n_hidden, d_hidden, rng,
                           likelihood, activation)
    if kind is BaselineKind.CONDITIONAL_VAE:
        return build_model("conditional_vae", n_features, n_classes, d_latent, n_hidden,
                           d_hidden, rng, likelihood, activation)
    raise AssertionError(f"unhandled baseline {kind}")  # pragma: no cover
