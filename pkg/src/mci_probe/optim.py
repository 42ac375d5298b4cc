"""Adam with decoupled weight decay."""

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import Tensor


@dataclass
class AdamState:
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    lr: float,
    weight_decay: float,
    state: AdamState,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One update; returns new parameter arrays and a new state.

    Decay multiplies each parameter by ``1 - lr * weight_decay`` before,
    and independently of, the moment-based step. A missing gradient counts
    as zero.
    """
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    if weight_decay < 0:
        raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")

    grads = [np.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")

    exp_avg = state.exp_avg or [np.zeros_like(p) for p in params]
    exp_avg_sq = state.exp_avg_sq or [np.zeros_like(p) for p in params]
    beta1, beta2 = betas
    step = state.step + 1
    bias1 = 1.0 - beta1**step
    bias2 = 1.0 - beta2**step

    new_params, new_avg, new_avg_sq = [], [], []
    for p, g, m, v in zip(params, grads, exp_avg, exp_avg_sq):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p = p * (1.0 - lr * weight_decay)
        p = p - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        new_params.append(p)
        new_avg.append(m)
        new_avg_sq.append(v)
    return new_params, AdamState(step=step, exp_avg=new_avg, exp_avg_sq=new_avg_sq)


class AdamW:
    """Owns a list of parameter tensors and updates them in place."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        new, self.state = adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.lr,
            self.weight_decay,
            self.state,
            self.betas,
            self.eps,
        )
        for p, data in zip(self.params, new):
            p.data = data
