"""AdamW with decoupled weight decay, plus deterministic initialization.

Update rule per step (decay applied to the pre-update parameter):

    m = b1*m + (1-b1)*g         v = b2*v + (1-b2)*g^2
    m_hat = m/(1-b1^t)          v_hat = v/(1-b2^t)
    p <- p - lr * m_hat/(sqrt(v_hat)+eps) - lr * wd * p

Scalar oracle used by the tests: p=1.0, g=0.5, lr=0.1, b=(0.9,0.999),
eps=1e-8, wd=0.01 gives p = 0.899000002 after one step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .layers import ParamTensor


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"betas must lie in (0,1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError(f"bad eps={self.eps} or weight_decay={self.weight_decay}")


class AdamWState:
    """First/second moments per parameter plus the shared step count."""

    def __init__(self, params: list[ParamTensor]):
        self.t = 0
        self.m = {p.name: np.zeros(p.value.shape, dtype=np.float64) for p in params}
        self.v = {p.name: np.zeros(p.value.shape, dtype=np.float64) for p in params}


def adamw_step(params: list[ParamTensor], state: AdamWState, config) -> None:
    """One optimizer step in place.

    ``config`` needs lr/beta1/beta2/eps/weight_decay attributes, so both
    AdamWConfig and TrainConfig work.  Moments are kept in float64 and
    the update is cast back to the parameter dtype at the end.
    """
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad.data.astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        pv = p.value.data.astype(np.float64)
        pv -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        pv -= config.lr * config.weight_decay * p.value.data.astype(np.float64)
        p.value.data[...] = pv.astype(p.value.data.dtype)


def init_params(model, seed: int) -> None:
    """He-uniform fan-in init, fully determined by the seed.

    Conv weights draw from U(-b, b) with b = sqrt(6/fan_in) where
    fan_in = (cin/groups)*kh*kw, giving variance 2/fan_in.  Biases and
    norm shifts start at zero, norm scales at one.  Parameters are
    visited in the model's fixed registration order.
    """
    rng = np.random.default_rng(seed)
    for p in model.params():
        dt = p.value.data.dtype
        if p.name.endswith(".weight"):
            fan_in = int(np.prod(p.value.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            p.value.data[...] = rng.uniform(-bound, bound, p.value.shape).astype(dt)
        elif p.name.endswith(".gamma"):
            p.value.data[...] = dt.type(1)
        else:
            p.value.data[...] = dt.type(0)
        p.zero_grad()
