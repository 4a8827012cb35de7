"""SGD and Adam over lists of parameter tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor


def _validate(params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter required")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name!r} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before_clipping)``.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


class SGD:
    """Plain stochastic gradient descent: ``p <- p - lr * g``."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        _validate(self.params, grads)
        for p, g in zip(self.params, grads):
            p.data -= np.asarray(self.lr * g, dtype=p.data.dtype)
        self.step_count += 1

    def state_dict(self) -> dict:
        return {"step": self.step_count, "lr": self.lr, "slots": {}}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        _validate(self.params, grads)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_dict(self) -> dict:
        slots = {}
        for p, m, v in zip(self.params, self.m, self.v):
            slots[f"adam_m/{p.name}"] = m
            slots[f"adam_v/{p.name}"] = v
        return {"step": self.step_count, "lr": self.lr, "slots": slots}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        slots = state["slots"]
        for i, p in enumerate(self.params):
            self.m[i] = np.array(slots[f"adam_m/{p.name}"], dtype=p.data.dtype)
            self.v[i] = np.array(slots[f"adam_v/{p.name}"], dtype=p.data.dtype)
