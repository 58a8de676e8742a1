"""SGD with momentum and a per-epoch cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    lr_backbone: float = 0.003
    lr_classifier_and_mask: float = 0.01
    total_epochs: int = 20
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_classifier_and_mask <= 0:
            raise ParameterError("learning rates must be positive")
        if self.total_epochs < 0:
            raise ParameterError("total_epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")


def cosine_lr(epoch: int, cfg: SgdConfig, base_lr: float) -> float:
    """``base_lr * (1 + cos(pi * epoch / total_epochs)) / 2``, reaching 0 at the last boundary."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if cfg.total_epochs == 0:
        return base_lr
    if epoch == cfg.total_epochs:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs))


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    lr: float,
    momentum_state: list,
    momentum: float = 0.9,
) -> list[np.ndarray]:
    """One classic momentum step: ``v <- mu*v + g``; ``p <- p - lr*v``.

    ``momentum_state`` holds one velocity per parameter (``None`` before the
    first step) and is updated in place. Returns the new parameter arrays.
    """
    if len(params) != len(grads) or len(params) != len(momentum_state):
        raise DimensionError("params, grads and momentum_state must have equal length")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v = momentum_state[i]
        v = g.copy() if v is None else momentum * v + g
        momentum_state[i] = v
        out.append(p - lr * v)
    return out


class SGD:
    """Momentum SGD over named parameter groups, each with its own learning rate.

    Each group's parameters are moved into one contiguous buffer (``p.data``
    becomes a view into it), so an update costs a handful of array ops per
    group however many tensors the group holds. Code that replaces
    ``p.data`` wholesale after construction detaches it from the optimizer;
    write into it in place instead.
    """

    def __init__(self, groups: dict[str, list[Tensor]], momentum: float = 0.9):
        self.groups = {name: list(ps) for name, ps in groups.items()}
        self.momentum = momentum
        self.lr = {name: 0.0 for name in self.groups}
        self._flat: dict[str, np.ndarray] = {}
        self._velocity: dict[str, np.ndarray | None] = {}
        for name, ps in self.groups.items():
            flat = np.concatenate([p.data.ravel() for p in ps]) if ps else np.zeros(0)
            offset = 0
            for p in ps:
                n = p.data.size
                p.data = flat[offset:offset + n].reshape(p.data.shape)
                offset += n
            self._flat[name] = flat
            self._velocity[name] = None

    def zero_grad(self) -> None:
        for ps in self.groups.values():
            for p in ps:
                p.grad = None

    def step(self) -> None:
        for name, ps in self.groups.items():
            if not ps:
                continue
            parts = []
            for p in ps:
                g = p.grad
                if g is None:
                    g = np.zeros(p.data.size)
                elif g.shape != p.data.shape:
                    raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
                parts.append(g.ravel())
            g = np.concatenate(parts)
            v = self._velocity[name]
            v = g if v is None else self.momentum * v + g
            self._velocity[name] = v
            self._flat[name] -= self.lr[name] * v
