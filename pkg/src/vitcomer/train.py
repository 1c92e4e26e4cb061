"""Toy segmentation training: SGD with momentum over every model parameter."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, add, no_tape, scale, set_check_finite
from .model import CoMer


class DivergenceError(RuntimeError):
    pass


class SGD:
    """v <- momentum * v + c * g;  p <- p - lr * v.

    c rescales the step so the global gradient norm never exceeds
    ``clip_norm`` (c = 1 when clipping is off or the norm is below it).
    """

    def __init__(self, params, lr: float, momentum: float = 0.9,
                 clip_norm: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.last_norm = 0.0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for p in self.params if p.grad is not None))

    def step(self) -> None:
        self.last_norm = self.grad_norm()
        c = 1.0
        if self.clip_norm is not None and self.last_norm > self.clip_norm:
            c = self.clip_norm / self.last_norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad if c == 1.0 else c * p.grad
            p.data -= np.asarray(self.lr * v, dtype=p.dtype)


def batch_loss(model: CoMer, images: np.ndarray, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy over a batch (all images share one tape)."""
    total = None
    for img, lab in zip(images, labels):
        li = model.loss(Tensor(img), lab)
        total = li if total is None else add(total, li)
    return scale(total, 1.0 / len(images))


def train_step(model: CoMer, opt: SGD, images: np.ndarray, labels: np.ndarray) -> float:
    model.zero_grad()
    with Tape() as tape:
        loss = batch_loss(model, images, labels)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite training loss {value}")
        tape.backward(loss)
    opt.step()
    return value


def evaluate(model: CoMer, images: np.ndarray, labels: np.ndarray) -> float:
    with no_tape():
        return batch_loss(model, images, labels).item()


@dataclass
class TrainResult:
    losses: list
    initial_loss: float
    final_loss: float


def train(model: CoMer, images: np.ndarray, labels: np.ndarray, steps: int, lr: float,
          momentum: float = 0.9, batch: int = 10, clip_norm: Optional[float] = 1.0,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Cycle through the set in fixed order; abort if the loss exceeds 10x the initial one.

    ``final_loss`` is measured on the whole set after the last update.
    """
    set_check_finite(False)
    try:
        opt = SGD(model.parameters(), lr, momentum, clip_norm)
        initial = evaluate(model, images, labels)
        n = len(images)
        losses = []
        for step in range(steps):
            idx = [(step * batch + j) % n for j in range(batch)]
            value = train_step(model, opt, images[idx], labels[idx])
            losses.append(value)
            if on_step is not None:
                on_step(step, value)
            if value > 10.0 * initial:
                raise DivergenceError(f"step {step}: loss {value:.6g} exceeds 10x initial "
                                      f"{initial:.6g}")
        return TrainResult(losses, initial, evaluate(model, images, labels))
    finally:
        set_check_finite(True)
