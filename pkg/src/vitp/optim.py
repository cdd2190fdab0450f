"""Parameter storage, SGD, global-norm clipping and the warmup/cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Named parameters, always iterated in lexicographic name order."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        for name, value in (entries or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(value, Tensor):
            value = Tensor(np.asarray(value), requires_grad=True)
        self._entries[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._entries[n]) for n in self.names()]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._entries.values()))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            data = t.data.copy() if dtype is None else t.data.astype(dtype)
            out[name] = Tensor(data, requires_grad=t.requires_grad)
        return out

    def subset(self, prefix: str) -> list[str]:
        return [n for n in self.names() if n.startswith(prefix)]


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    base_lr: float = 1e-2
    warmup_steps: int = 1000
    clip_norm: float = 1.0
    momentum: float = 0.0

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}/{self.total_steps}")
        if self.base_lr <= 0 or self.clip_norm <= 0:
            raise ValueError("base_lr and clip_norm must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: ParamStore) -> float:
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(params: ParamStore, clip_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``clip_norm``.

    Returns the scale that was applied (1.0 when no clipping happened).
    """
    norm = global_grad_norm(params)
    if norm <= clip_norm:
        return 1.0
    scale = clip_norm / norm
    for _, t in params.items():
        if t.grad is not None:
            t.grad = (t.grad * scale).astype(t.data.dtype)
    return scale


class SGD:
    """Plain SGD; optional heavy-ball momentum (off by default)."""

    def __init__(self, params: ParamStore, momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        sgd_step(self.params, lr, self.momentum, self._velocity)


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.0,
             velocity: dict | None = None) -> None:
    """``p <- p - lr * grad`` for every parameter, then clear the grads."""
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    for name, t in params.items():
        g = t.grad
        if momentum:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v
            g = v
        t.data = (t.data - t.data.dtype.type(lr) * g).astype(t.data.dtype)
        t.grad = None
