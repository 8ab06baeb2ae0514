"""Encoders, decoders, adversary and the data-anchored prior for w.

Parameter groups follow the two-timescale update: ``phi`` (z encoder),
``psi`` (z-only decoder), ``rho_enc`` (w encoder), ``eta`` (joint decoder)
and ``beta`` (adversarial logistic regression on the z-only reconstruction).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .distributions import DiagGaussian, positive_variance

Likelihood = Literal["gaussian", "bernoulli"]

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "softplus": ad.softplus}


class InputError(ValueError):
    """Malformed model input (non-finite values, labels out of range)."""


class IntegrityError(RuntimeError):
    """A checkpoint does not match its manifest."""


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = ad.parameter(rng.uniform(-bound, bound, (n_in, n_out)), f"{name}.weight")
        self.bias = ad.parameter(rng.uniform(-bound, bound, (n_out,)), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """``n_hidden`` hidden layers of width ``d_hidden`` followed by a linear head."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        n_hidden: int,
        d_hidden: int,
        rng: np.random.Generator,
        name: str,
        activation: str = "relu",
    ):
        sizes = [n_in] + [d_hidden] * n_hidden + [n_out]
        self.layers = [
            Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.act = ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class GaussianEncoder:
    """MLP emitting (mean, variance) for a diagonal Gaussian."""

    def __init__(self, n_in, d_latent, n_hidden, d_hidden, rng, name, activation="relu"):
        self.d_latent = d_latent
        self.net = MLP(n_in, 2 * d_latent, n_hidden, d_hidden, rng, name, activation)

    def __call__(self, x: Tensor) -> DiagGaussian:
        out = self.net(x)
        d = self.d_latent
        return DiagGaussian(out[:, :d], positive_variance(out[:, d:]))

    def parameters(self):
        return self.net.parameters()


def one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"labels must lie in 0..{n_classes - 1}, got range {y.min()}..{y.max()}")
    out = np.zeros((y.shape[0], n_classes), dtype=np.float32)
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise InputError("input contains NaN or infinite values")
    return x


@dataclass
class PriorMeans:
    """Class-wise means of z anchoring p(w | y=k) = N(mu_k, I)."""

    mu_k: Tensor
    counts: np.ndarray

    def for_labels(self, y: np.ndarray) -> Tensor:
        return ad.tensor(one_hot(y, self.mu_k.shape[0])) @ self.mu_k


def estimate_class_means(
    z: Tensor,
    y: np.ndarray,
    n_classes: int,
    running: np.ndarray | None = None,
    detach: bool = False,
) -> PriorMeans:
    """Per-class sample means of ``z``.

    Classes absent from the batch take the row of ``running`` (the running
    average from previous steps) or, with no history, the batch mean.
    """
    z = z.detach() if detach else ad.tensor(z)
    y = np.asarray(y)
    onehot = one_hot(y, n_classes)
    counts = onehot.sum(axis=0)
    sums = ad.tensor(onehot.T) @ z
    present = counts > 0
    if present.all():
        return PriorMeans(sums / counts[:, None].astype(np.float32), counts)
    if running is None:
        fallback = z.data.mean(axis=0, keepdims=True).repeat(n_classes, axis=0)
    else:
        fallback = np.asarray(running, dtype=np.float32)
    safe = np.where(present, counts, 1.0)[:, None].astype(np.float32)
    mask = present[:, None].astype(np.float32)
    mu = (sums / safe) * mask + ad.tensor(fallback * (1.0 - mask))
    return PriorMeans(mu, counts)


class DiscoverNet:
    """Dual-latent encoder/decoder stack with an adversary on x-hat."""

    kind = "discover"

    def __init__(
        self,
        n_features: int,
        n_classes: int,
        d_latent: int,
        n_hidden: int,
        d_hidden: int,
        rng: np.random.Generator,
        likelihood: Likelihood = "gaussian",
        activation: str = "relu",
    ):
        self.n_features = n_features
        self.n_classes = n_classes
        self.d_latent = d_latent
        self.likelihood = likelihood
        self.enc_z = GaussianEncoder(n_features, d_latent, n_hidden, d_hidden, rng, "phi", activation)
        self.dec_z = MLP(d_latent, n_features, n_hidden, d_hidden, rng, "psi", activation)
        self.enc_w = GaussianEncoder(
            n_features + n_classes, d_latent, n_hidden, d_hidden, rng, "rho_enc", activation
        )
        self.dec_zw = MLP(2 * d_latent, n_features, n_hidden, d_hidden, rng, "eta", activation)
        self.adversary = Linear(n_features, n_classes, rng, "beta")
        self.prior_means = np.zeros((n_classes, d_latent), dtype=np.float32)

    @property
    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "phi": self.enc_z.parameters(),
            "psi": self.dec_z.parameters(),
            "rho_enc": self.enc_w.parameters(),
            "eta": self.dec_zw.parameters(),
            "beta": self.adversary.parameters(),
        }

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {"prior_means": self.prior_means}

    def encode_z(self, x) -> DiagGaussian:
        return self.enc_z(ad.tensor(x))

    def encode_w(self, x, y) -> DiagGaussian:
        x = ad.tensor(x)
        return self.enc_w(ad.concat([x, ad.tensor(one_hot(y, self.n_classes))], axis=1))

    def decoder_output(self, logits: Tensor) -> Tensor:
        return ad.sigmoid(logits) if self.likelihood == "bernoulli" else logits

    def decode_z_logits(self, z) -> Tensor:
        return self.dec_z(ad.tensor(z))

    def decode_zw_logits(self, z, w) -> Tensor:
        return self.dec_zw(ad.concat([ad.tensor(z), ad.tensor(w)], axis=1))

    def decode_z(self, z) -> Tensor:
        return self.decoder_output(self.decode_z_logits(z))

    def decode_zw(self, z, w) -> Tensor:
        return self.decoder_output(self.decode_zw_logits(z, w))

    def classify_reconstruction(self, x_hat) -> Tensor:
        """Row-wise log-probabilities of the K conditions given x-hat."""
        return ad.log_softmax(self.adversary(ad.tensor(x_hat)), axis=1)


class PlainVAENet:
    """Single-latent VAE: q(z|x), p(x|z)."""

    kind = "plain_vae"

    def __init__(self, n_features, n_classes, d_latent, n_hidden, d_hidden, rng,
                 likelihood: Likelihood = "gaussian", activation="relu"):
        self.n_features = n_features
        self.n_classes = n_classes
        self.d_latent = d_latent
        self.likelihood = likelihood
        self.enc_z = GaussianEncoder(n_features, d_latent, n_hidden, d_hidden, rng, "phi", activation)
        self.dec_z = MLP(d_latent, n_features, n_hidden, d_hidden, rng, "psi", activation)

    @property
    def groups(self):
        return {"phi": self.enc_z.parameters(), "psi": self.dec_z.parameters()}

    @property
    def buffers(self):
        return {}

    def encode_z(self, x) -> DiagGaussian:
        return self.enc_z(ad.tensor(x))

    decoder_output = DiscoverNet.decoder_output

    def decode_z_logits(self, z) -> Tensor:
        return self.dec_z(ad.tensor(z))

    def decode_z(self, z) -> Tensor:
        return self.decoder_output(self.decode_z_logits(z))


class ConditionalVAENet:
    """Label fed to both encoder and decoder: q(z|x,y), p(x|z,y)."""

    kind = "conditional_vae"

    def __init__(self, n_features, n_classes, d_latent, n_hidden, d_hidden, rng,
                 likelihood: Likelihood = "gaussian", activation="relu"):
        self.n_features = n_features
        self.n_classes = n_classes
        self.d_latent = d_latent
        self.likelihood = likelihood
        self.enc_z = GaussianEncoder(
            n_features + n_classes, d_latent, n_hidden, d_hidden, rng, "phi", activation
        )
        self.dec_zy = MLP(d_latent + n_classes, n_features, n_hidden, d_hidden, rng, "psi", activation)

    @property
    def groups(self):
        return {"phi": self.enc_z.parameters(), "psi": self.dec_zy.parameters()}

    @property
    def buffers(self):
        return {}

    decoder_output = DiscoverNet.decoder_output

    def encode_z(self, x, y) -> DiagGaussian:
        return self.enc_z(ad.concat([ad.tensor(x), ad.tensor(one_hot(y, self.n_classes))], axis=1))

    def decode_zy_logits(self, z, y) -> Tensor:
        return self.dec_zy(ad.concat([ad.tensor(z), ad.tensor(one_hot(y, self.n_classes))], axis=1))

    def decode_zy(self, z, y) -> Tensor:
        return self.decoder_output(self.decode_zy_logits(z, y))


MODEL_KINDS = {
    "discover": DiscoverNet,
    "plain_vae": PlainVAENet,
    "conditional_vae": ConditionalVAENet,
}


def build_model(kind: str, n_features: int, n_classes: int, d_latent: int, n_hidden: int,
                d_hidden: int, rng: np.random.Generator, likelihood: Likelihood = "gaussian",
                activation: str = "relu"):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ContractError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
    model = cls(n_features, n_classes, d_latent, n_hidden, d_hidden, rng, likelihood, activation)
    model.arch = {"n_hidden": n_hidden, "d_hidden": d_hidden, "activation": activation}
    return model


def all_parameters(model) -> list[Tensor]:
    return [p for group in model.groups.values() for p in group]


def parameter_count(model) -> int:
    return sum(p.size for p in all_parameters(model))


def snapshot(model) -> list[np.ndarray]:
    arrays = [p.data.copy() for p in all_parameters(model)]
    arrays += [b.copy() for b in model.buffers.values()]
    return arrays


def restore(model, arrays: list[np.ndarray]) -> None:
    params = all_parameters(model)
    for p, a in zip(params, arrays):
        p.data = a.copy()
    for (name, buf), a in zip(model.buffers.items(), arrays[len(params):]):
        buf[...] = a


# -- checkpoint I/O ------------------------------------------------------------------


@dataclass
class Manifest:
    model: dict
    entries: list[dict] = field(default_factory=list)
    blob_sha256: str = ""
    blob_bytes: int = 0


def _arrays_with_names(model) -> list[tuple[str, str, np.ndarray]]:
    out = []
    for group, params in model.groups.items():
        for p in params:
            out.append((group, p.name, p.data))
    for name, buf in model.buffers.items():
        out.append(("buffers", name, buf))
    return out


def model_spec(model) -> dict:
    spec = {
        "kind": model.kind,
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "d_latent": model.d_latent,
        "likelihood": model.likelihood,
    }
    spec.update(getattr(model, "arch", {}))
    return spec


def save_checkpoint(model, directory: str | Path, stem: str = "checkpoint") -> Path:
    """Write ``<stem>.json`` (manifest) and ``<stem>.bin`` (little-endian float32 blob)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for group, name, arr in _arrays_with_names(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "model": model_spec(model),
        "entries": entries,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (directory / f"{stem}.bin").write_bytes(blob)
    (directory / f"{stem}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory / f"{stem}.json"


def load_checkpoint(directory: str | Path, stem: str = "checkpoint"):
    """Rebuild a model from a checkpoint, verifying sizes and checksum."""
    directory = Path(directory)
    mpath, bpath = directory / f"{stem}.json", directory / f"{stem}.bin"
    if not mpath.exists() or not bpath.exists():
        raise IntegrityError(f"missing checkpoint files in {directory}")
    manifest = json.loads(mpath.read_text())
    blob = bpath.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise IntegrityError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise IntegrityError(f"checksum mismatch for {bpath}")
    spec = manifest["model"]
    model = build_model(
        spec["kind"], spec["n_features"], spec["n_classes"], spec["d_latent"],
        spec.get("n_hidden", 0), spec.get("d_hidden", 1), np.random.default_rng(0),
        spec["likelihood"], spec.get("activation", "relu"),
    )
    model.arch = {k: spec[k] for k in ("n_hidden", "d_hidden", "activation") if k in spec}
    expected = _arrays_with_names(model)
    if len(expected) != len(manifest["entries"]):
        raise IntegrityError(
            f"manifest lists {len(manifest['entries'])} arrays, model has {len(expected)}"
        )
    for (group, name, arr), entry in zip(expected, manifest["entries"]):
        if entry["name"] != name or tuple(entry["shape"]) != arr.shape:
            raise IntegrityError(
                f"entry {entry['name']} {entry['shape']} does not match {name} {list(arr.shape)}"
            )
        values = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=entry["offset"])
        arr[...] = values.reshape(arr.shape)
    return model
