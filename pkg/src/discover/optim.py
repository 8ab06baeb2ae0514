"""AdamW and global-norm gradient clipping over autodiff tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ContractError, Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter).

    The update for parameter ``p`` with gradient ``g`` at step ``t``::

        m = b1*m + (1-b1)*g ;  v = b2*v + (1-b2)*g*g
        p = p*(1 - lr*wd) - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"missing gradient for parameter {p.name or '<unnamed>'}")
            if p.grad.shape != p.shape:
                raise ContractError(
                    f"gradient shape {p.grad.shape} does not match parameter "
                    f"{p.name or '<unnamed>'} of shape {p.shape}"
                )
        s = self.state
        s.step += 1
        bc1 = 1.0 - s.beta1**s.step
        bc2 = 1.0 - s.beta2**s.step
        step_size = s.lr / bc1
        decay = 1.0 - s.lr * s.weight_decay
        for p, m, v in zip(self.params, s.m, s.v):
            g = p.grad
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            denom = np.sqrt(v / bc2) + s.eps
            if decay != 1.0:
                p.data *= p.data.dtype.type(decay)
            p.data -= (step_size * m / denom).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping; NaN signals a non-finite gradient, in
    which case nothing is rescaled and the caller should skip the step.
    """
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        return float("nan")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm
