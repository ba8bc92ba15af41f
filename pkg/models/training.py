"""
Shared minibatch training loop
AdamW with cosine annealing, global-norm clipping at 1.0 and an EMA shadow,
reporting one curve row per epoch (epoch, train_loss, heldout_loss, lr).
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from utils import diff_engine as de
from utils import rng as rng_streams
from utils.errors import NumericsError
from utils.optim import (EmaState, OptimizerState, adamw_step, clip_grad_norm, cosine_lr,
                         ema_update)

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-2
    clip: float = 1.0
    ema_decay: float = 0.999
    log_every: int = 10


@dataclass
class TrainingResult:
    curve: list = field(default_factory=list)
    ema: EmaState = None
    optimizer: OptimizerState = None
    parameters: int = 0
    raw: dict = None

    @property
    def final_loss(self):
        return self.curve[-1]['train_loss'] if self.curve else float('nan')


def check_loss(loss, where):
    value = loss.item() if isinstance(loss, de.Tensor) else float(loss)
    if not math.isfinite(value):
        raise NumericsError(f'Non-finite loss at {where}')
    if value > DIVERGENCE_LIMIT:
        raise NumericsError(f'Training diverged at {where}: loss {value:.3e} > {DIVERGENCE_LIMIT:.0e}')
    return value


def train(module, loss_fn, n_items, settings, seed, heldout_fn=None, verbose=False, name='model'):
    """
    Minimize loss_fn over shuffled minibatches

    Args:
        module (Module): network whose trainable parameters are optimized
        loss_fn (callable): loss_fn(indices, step_key) -> scalar Tensor
        n_items (int): training set size
        settings (TrainSettings): optimization settings
        seed (int): run seed (shuffling uses its own stream)
        heldout_fn (callable): optional, returns a float held-out loss
        name (str): label used in progress lines

    Returns:
        TrainingResult
    """
    params = module.trainable()
    batches = max(1, math.ceil(n_items / settings.batch_size))
    horizon = settings.epochs * batches
    state = OptimizerState.for_parameters(params, lr=settings.lr, weight_decay=settings.weight_decay,
                                          horizon=horizon)
    ema = EmaState.from_parameters(params, settings.ema_decay)
    result = TrainingResult(ema=ema, optimizer=state, parameters=module.num_parameters())

    if heldout_fn:
        result.curve.append({'epoch': 0, 'train_loss': float('nan'), 'heldout_loss': heldout_fn(),
                             'lr': settings.lr})
    if verbose:
        print(f"🚀 Training {name}: {result.parameters} parameters, {settings.epochs} epochs x {batches} batches")

    for epoch in range(1, settings.epochs + 1):
        order = rng_streams.stream(seed, 'shuffle', epoch).permutation(n_items)
        losses = []
        for b in range(batches):
            indices = np.sort(order[b * settings.batch_size:(b + 1) * settings.batch_size])
            loss = loss_fn(indices, (epoch, b))
            losses.append(check_loss(loss, f'{name} epoch {epoch} batch {b}'))
            leaves = de.backward(loss)
            grads = {n: leaves[p] for n, p in params.items() if p in leaves}
            clip_grad_norm(grads, settings.clip)
            lr_now = cosine_lr(settings.lr, state.step, horizon)
            adamw_step(params, grads, state, lr_now)
            ema_update(ema, params)

        row = {'epoch': epoch, 'train_loss': float(np.mean(losses)),
               'heldout_loss': heldout_fn() if heldout_fn else float('nan'),
               'lr': cosine_lr(settings.lr, state.step, horizon)}
        result.curve.append(row)
        if verbose and (epoch % settings.log_every == 0 or epoch == settings.epochs):
            print(f"📊 {name} epoch {epoch}/{settings.epochs}: train {row['train_loss']:.4e}"
                  f" heldout {row['heldout_loss']:.4e} lr {row['lr']:.2e}")
    result.raw = module.state()
    return result


def apply_ema(module, ema):
    """Load EMA shadow weights into the module (inference weights)"""
    module.load_state(ema.shadow, strict=False)
    return module


def write_curve(path, curve):
    """Persist a training curve as CSV"""
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=['epoch', 'train_loss', 'heldout_loss', 'lr'])
        writer.writeheader()
        for row in curve:
            writer.writerow(row)


def smoothed(values, window=5):
    """Trailing moving average used to judge loss trends"""
    values = np.asarray(values, dtype=float)
    if values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode='valid')
