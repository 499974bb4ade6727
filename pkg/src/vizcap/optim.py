"""ADAM and the warmup / inverse-square-root learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, Tensor

# SCST restarts the step counter far into the decay region.
SCST_STEP_OFFSET = 50_000


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    base_lr: float = 1e-3
    warmup_steps: int = 2000

    def __post_init__(self):
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ValueError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.base_lr <= 0 or self.epsilon <= 0:
            raise ValueError("base_lr and epsilon must be positive")


@dataclass
class ScheduleState:
    step: int = 0
    offset: int = 0

    @property
    def effective(self) -> int:
        return self.step + self.offset

    @classmethod
    def for_scst(cls, last_ce_step: int, offset: int = SCST_STEP_OFFSET) -> "ScheduleState":
        return cls(step=last_ce_step, offset=offset)


def learning_rate(config: OptimizerConfig, schedule: ScheduleState) -> float:
    """Linear warmup to ``base_lr``, then ``base_lr * sqrt(warmup / i)``.

    The two branches meet at ``i == warmup_steps``.  Step 0 is treated as
    step 1 so the rate stays positive.
    """
    i = max(schedule.effective, 1)
    w = config.warmup_steps
    if w == 0:
        return config.base_lr / math.sqrt(i)
    if i <= w:
        return config.base_lr * i / w
    return config.base_lr * math.sqrt(w / i)


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, config: OptimizerConfig, lr: float):
    """One bias-corrected ADAM update.  Pure: returns ``(param, m, v)``.

    ``t`` is the 1-based optimizer step used for bias correction.
    """
    if not np.isfinite(grad).all():
        raise NonFiniteError("non-finite gradient; step rejected")
    b1, b2 = config.beta1, config.beta2
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    step = lr * mhat / (np.sqrt(vhat) + config.epsilon)
    return (param - step).astype(param.dtype), m.astype(param.dtype), v.astype(param.dtype)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params.values() if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """Stateful wrapper over :func:`adam_update` keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig | None = None):
        self.params = params
        self.config = config or OptimizerConfig()
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, schedule: ScheduleState) -> float:
        """Apply one update at the schedule's current rate, then advance it."""
        lr = learning_rate(self.config, schedule)
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {k}; step rejected")
        self.t += 1
        for k, p in self.params.items():
            p.data, self.m[k], self.v[k] = adam_update(
                p.data, grads[k], self.m[k], self.v[k], self.t, self.config, lr)
        schedule.step += 1
        return lr

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"__t__": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["__t__"][0])
        for k, p in self.params.items():
            self.m[k] = tensors[f"m/{k}"].astype(p.dtype).reshape(p.shape)
            self.v[k] = tensors[f"v/{k}"].astype(p.dtype).reshape(p.shape)
