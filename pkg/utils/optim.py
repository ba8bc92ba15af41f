"""
Optimizer utilities
AdamW with decoupled weight decay, cosine learning-rate annealing, global
gradient-norm clipping and an exponential moving average of parameters.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from utils.errors import NumericsError, UsageError


@dataclass
class OptimizerState:
    """AdamW moments plus schedule settings"""
    lr: float = 1e-3
    weight_decay: float = 1e-2
    horizon: int = 1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params, **settings):
        state = cls(**settings)
        for name, p in params.items():
            state.m[name] = np.zeros_like(_array(p))
            state.v[name] = np.zeros_like(_array(p))
        return state


@dataclass
class EmaState:
    """Shadow copy of parameters"""
    shadow: dict
    decay: float = 0.999

    @classmethod
    def from_parameters(cls, params, decay=0.999):
        if not 0.0 < decay < 1.0:
            raise UsageError(f'EMA decay must lie in (0, 1), got {decay}')
        return cls({name: _array(p).copy() for name, p in params.items()}, decay)


def _array(p):
    return p.data if hasattr(p, 'data') and not isinstance(p, np.ndarray) else np.asarray(p)


def cosine_lr(base_lr, step, horizon):
    """Cosine annealing from base_lr at step 0 to 0 at step == horizon"""
    if horizon <= 0:
        return base_lr
    progress = min(max(step / horizon, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads):
    return math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))


def clip_grad_norm(grads, max_norm=1.0):
    """
    Rescale gradients in place so their global L2 norm is at most max_norm

    Returns:
        float: the norm before clipping
    """
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def adamw_step(params, grads, state, lr_now):
    """
    One AdamW update

    Args:
        params (dict): name -> Tensor, updated in place
        grads (dict): name -> gradient array (already clipped)
        state (OptimizerState): moments, updated in place
        lr_now (float): learning rate for this step

    Returns:
        OptimizerState: the same state with its step counter advanced
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f'Non-finite gradient in parameter {name} at optimizer step {state.step + 1}')

    beta1, beta2 = state.betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data = (p.data * (1.0 - lr_now * state.weight_decay) - lr_now * update).astype(p.dtype, copy=False)
    return state


def ema_update(ema, params):
    """shadow <- decay * shadow + (1 - decay) * params"""
    for name, p in params.items():
        value = _array(p)
        if name not in ema.shadow:
            raise UsageError(f'EMA has no shadow for parameter {name}')
        if ema.shadow[name].shape != value.shape:
            raise UsageError(f'EMA shadow {name} has shape {ema.shadow[name].shape}, parameter has {value.shape}')
        ema.shadow[name] = ema.decay * ema.shadow[name] + (1.0 - ema.decay) * value
    return ema
