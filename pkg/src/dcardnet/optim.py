"""SGD with Nesterov momentum and a floored cosine learning-rate decay."""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CosineSchedule:
    lr_init: float = 0.01
    step_stop: int = 6000
    floor_fraction: float = 0.03
    span_fraction: float = 0.97


def cosine_lr(step, schedule=CosineSchedule()):
    """lr_init * (span * d + floor) with d = (1 + cos(pi * t / step_stop)) / 2.

    ``t`` is the step clamped to ``step_stop``, so the rate stays at
    ``lr_init * floor`` once the decay is over.
    """
    if schedule.step_stop <= 0:
        raise ValueError("step_stop must be positive")
    if step < 0:
        raise ValueError("step must be non-negative")
    t = min(step, schedule.step_stop)
    d = 0.5 * (1.0 + math.cos(math.pi * t / schedule.step_stop))
    return schedule.lr_init * (schedule.span_fraction * d + schedule.floor_fraction)


class NesterovSGD:
    """Per parameter: v <- mu*v - lr*g; theta <- theta + mu*v - lr*g."""

    def __init__(self, params, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        sgd_nesterov_step(self.params, self.velocity, self.momentum, lr)


def sgd_nesterov_step(params, velocity, momentum, lr):
    for p, v in zip(params, velocity):
        g = p.grad
        if g is None:
            continue
        if g.shape != v.shape:
            raise ValueError(f"gradient shape {g.shape} does not match velocity {v.shape} for {p.name}")
        g = g.astype(p.data.dtype, copy=False)
        mu = p.data.dtype.type(momentum)
        step = p.data.dtype.type(lr) * g
        v *= mu
        v -= step
        p.data += mu * v - step
        p.grad = None
