"""Learning-rate schedules and first-order optimizers.

Two update rules are provided behind one Optimizer facade: classic
momentum SGD and an RMSprop-style variant where the decay factor feeds a
squared-gradient accumulator instead of a velocity.  Both share the same
schedule machinery and optional global-norm gradient clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Parameter

SCHEDULE_KINDS = ("constant", "step_down", "exponential")


@dataclass(frozen=True)
class LrSchedule:
    """Effective learning rate as a function of the epoch index.

    step_down drops the rate by step_multiplier once per step_fraction of
    the total epochs, with the final segment absorbing the remainder, so
    e.g. fraction 1/3 over 100 epochs gives segments [0,33), [33,66) and
    [66,100).  exponential multiplies by decay each epoch.
    """

    base_rate: float
    kind: str = "constant"
    step_fraction: float = 1.0 / 3.0
    step_multiplier: float = 0.5
    decay: float = 1.0

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ConfigError(f"schedule: base_rate must be positive, got {self.base_rate}")
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule: unknown kind {self.kind!r}")
        if not 0 < self.step_fraction <= 1:
            raise ConfigError(f"schedule: step_fraction must be in (0, 1], got {self.step_fraction}")
        if not 0 < self.step_multiplier < 1:
            raise ConfigError(
                f"schedule: step_multiplier must be in (0, 1), got {self.step_multiplier}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"schedule: decay must be in (0, 1], got {self.decay}")

    def rate(self, epoch: int, total_epochs: int) -> float:
        if epoch < 0 or total_epochs <= 0:
            raise UsageError(f"schedule: bad epoch {epoch} of {total_epochs}")
        if self.kind == "constant":
            return self.base_rate
        if self.kind == "exponential":
            # Guard against float underflow so the rate stays positive.
            return max(self.base_rate * self.decay ** epoch, 5e-324)
        step_size = max(1, math.floor(total_epochs * self.step_fraction))
        num_steps = max(1, round(1.0 / self.step_fraction))
        index = min(epoch // step_size, num_steps - 1)
        return self.base_rate * self.step_multiplier ** index


def global_grad_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.trainable and p.tensor.grad is not None:
            total += float(np.sum(p.tensor.grad * p.tensor.grad))
    return math.sqrt(total)


def clip_grads(params: list[Parameter], max_norm: float) -> float:
    """Scale all trainable grads so their global norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.trainable and p.tensor.grad is not None:
                p.tensor.grad *= factor
    return norm


def _require_grads(params: list[Parameter]) -> None:
    missing = [p.name for p in params if p.trainable and p.tensor.grad is None]
    if missing:
        raise UsageError(f"optimizer step with missing grads: {', '.join(missing)}; "
                         "run backward() first")


def sgd_step(params: list[Parameter], schedule: LrSchedule, epoch: int, total_epochs: int,
             momentum_decay: float = 0.0, state: dict | None = None,
             clip_norm: float | None = None,
             lr_scales: dict[str, float] | None = None) -> dict:
    """One momentum-SGD update over all trainable params; zeroes their grads.

    state maps parameter name to its velocity buffer and is created on
    first use; pass the returned dict back in on subsequent steps.
    """
    _require_grads(params)
    if state is None:
        state = {}
    if clip_norm is not None:
        clip_grads(params, clip_norm)
    rate = schedule.rate(epoch, total_epochs)
    for p in params:
        if not p.trainable:
            continue
        lr = rate * (lr_scales.get(p.name, 1.0) if lr_scales else 1.0)
        v = state.get(p.name)
        if v is None:
            v = np.zeros_like(p.tensor.data)
        v = momentum_decay * v - lr * p.tensor.grad
        state[p.name] = v
        p.tensor.data = p.tensor.data + v
        p.tensor.zero_grad()
    return state


def rmsprop_step(params: list[Parameter], schedule: LrSchedule, epoch: int, total_epochs: int,
                 decay: float = 0.99, epsilon: float = 1e-8, state: dict | None = None,
                 clip_norm: float | None = None,
                 lr_scales: dict[str, float] | None = None) -> dict:
    """One RMSprop update: decay feeds the squared-gradient accumulator."""
    _require_grads(params)
    if state is None:
        state = {}
    if clip_norm is not None:
        clip_grads(params, clip_norm)
    rate = schedule.rate(epoch, total_epochs)
    for p in params:
        if not p.trainable:
            continue
        lr = rate * (lr_scales.get(p.name, 1.0) if lr_scales else 1.0)
        g = p.tensor.grad
        acc = state.get(p.name)
        if acc is None:
            acc = np.zeros_like(p.tensor.data)
        acc = decay * acc + (1.0 - decay) * g * g
        state[p.name] = acc
        p.tensor.data = p.tensor.data - lr * g / (np.sqrt(acc) + epsilon)
        p.tensor.zero_grad()
    return state


class Optimizer:
    """Stateful wrapper tying params, schedule, and update rule together.

    kind "sgd" interprets decay as the momentum factor; kind "rmsprop"
    interprets it as the squared-gradient accumulator decay.
    """

    def __init__(self, params: list[Parameter], schedule: LrSchedule, kind: str = "sgd",
                 decay: float = 0.0, clip_norm: float | None = None,
                 lr_scales: dict[str, float] | None = None):
        if kind not in ("sgd", "rmsprop"):
            raise ConfigError(f"optimizer: unknown kind {kind!r}")
        self.params = params
        self.schedule = schedule
        self.kind = kind
        self.decay = decay
        self.clip_norm = clip_norm
        self.lr_scales = lr_scales
        self.state: dict = {}

    def step(self, epoch: int, total_epochs: int) -> None:
        if self.kind == "sgd":
            self.state = sgd_step(self.params, self.schedule, epoch, total_epochs,
                                  momentum_decay=self.decay, state=self.state,
                                  clip_norm=self.clip_norm, lr_scales=self.lr_scales)
        else:
            self.state = rmsprop_step(self.params, self.schedule, epoch, total_epochs,
                                      decay=self.decay, state=self.state,
                                      clip_norm=self.clip_norm, lr_scales=self.lr_scales)
