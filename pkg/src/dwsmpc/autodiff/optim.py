"""Adam with bias correction and an exponential moving average of weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> None:
    """Apply one Adam update in place.

    Raises:
        NonFiniteGradient: if any gradient holds NaN or inf; parameters are
            left untouched in that case.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer tracks {len(state.m)} parameters, got {len(params)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradient(f"parameter #{i} {p.name or p.shape}: {bad} non-finite gradient entries")
        if state.m[i].shape != p.shape:
            raise ValueError(f"moment shape {state.m[i].shape} != parameter shape {p.shape}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (state.lr * update).astype(p.dtype, copy=False)


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.clip_norm = clip_norm

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None))
            if np.isfinite(total) and total > self.clip_norm:
                grads = [None if g is None else g * (self.clip_norm / total) for g in grads]
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class EMA:
    """Shadow copy of parameters tracking an exponential moving average."""

    def __init__(self, named: dict[str, Tensor], decay: float = 0.999):
        self.decay = decay
        self.shadow = {k: v.data.copy() for k, v in named.items()}

    def update(self, named: dict[str, Tensor]) -> None:
        d = self.decay
        for k, v in named.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * v.data
