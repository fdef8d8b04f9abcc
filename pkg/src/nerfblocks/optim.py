"""Adam optimizer with bias correction and the warmup + log-annealed
learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .nets import ConfigurationError

__all__ = ["OptimizerState", "adam_step", "lr_schedule"]

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam state: step count, per-parameter moment accumulators, and
    hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped_steps: int = 0


def adam_step(state: OptimizerState, params: dict, grads: dict, lr: float) -> OptimizerState:
    """One Adam update over ``params`` (name -> Tensor), in place.

    ``grads`` maps the same names to gradient arrays; missing names are
    treated as zero gradient (parameter untouched).  If any gradient is
    non-finite the whole step is skipped and counted on the state.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped_steps += 1
            log.warning("skipping optimizer step %d: non-finite gradient in %s", state.step + 1, name)
            return state

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)
    return state


def lr_schedule(step, total, warmup=1024, lr_init=2e-3, lr_final=2e-5):
    """Log-linear anneal from lr_init to lr_final over [0, total], multiplied
    by a linear warmup ramp on [0, warmup]."""
    if total <= 0:
        raise ConfigurationError("total steps must be positive")
    if not 0 <= step <= total:
        raise ConfigurationError(f"step {step} outside [0, {total}]")
    t = step / total
    lr = float(np.exp(np.log(lr_init) * (1.0 - t) + np.log(lr_final) * t))
    if warmup > 0:
        lr *= min(1.0, step / warmup)
    return lr
