"""
Closed-loop rollout harness
Surrogates are fed their own predictions for H steps and scored per step
against held-out solver trajectories with NRMSE of the ensemble mean, CRPS
and SSR. Generative surrogates propagate every ensemble member through its
own trajectory.
"""
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from analysis import metrics
from models.dll_head import SAMPLER_STEPS, sample_members
from utils import rng as rng_streams
from utils.errors import ConfigurationError, PrerequisiteError, UsageError

ROLLOUT_METRICS = ('NRMSE', 'CRPS', 'SSR')


@dataclass
class RolloutConfig:
    horizon: int = 100
    ensemble_size: int = 32
    per_step: bool = True
    seed: int = 0
    sampler_steps: int = SAMPLER_STEPS
    snapshot_steps: tuple = ()

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError(f'Rollout horizon must be >= 1, got {self.horizon}')
        if self.ensemble_size < 1:
            raise ConfigurationError(f'Ensemble size must be >= 1, got {self.ensemble_size}')
        self.snapshot_steps = tuple(sorted(int(s) for s in self.snapshot_steps))


@dataclass
class RolloutRecord:
    """Per-step scores of one rollout; step 0 is the initial condition and never scored"""
    index: int = 0
    steps: list = field(default_factory=list)
    nrmse: list = field(default_factory=list)
    crps: list = field(default_factory=list)
    ssr: list = field(default_factory=list)
    truncated: bool = False
    truncated_at: int = None
    snapshots: dict = field(default_factory=dict)

    @property
    def length(self):
        return len(self.steps)

    def curve(self, name):
        return {'NRMSE': self.nrmse, 'CRPS': self.crps, 'SSR': self.ssr}[name]

    @property
    def averages(self):
        """Time averages over the scored (surviving) steps"""
        if not self.steps:
            return {name: float('nan') for name in ROLLOUT_METRICS}
        return {name: float(np.mean(self.curve(name))) for name in ROLLOUT_METRICS}

    def add_step(self, step, prediction, truth):
        self.steps.append(step)
        self.nrmse.append(metrics.nrmse_mean(prediction, truth[None]))
        self.crps.append(metrics.crps(prediction, truth))
        self.ssr.append(metrics.ssr(prediction, truth))

    def flags(self):
        return [f'truncated@{self.truncated_at}'] if self.truncated else []


# ============= SURROGATES =============

class Surrogate:
    """Maps an ensemble of states (K, *spatial) to the next ensemble, physical units"""
    stochastic = False
    name = 'surrogate'

    def step(self, states, t, member_seeds):
        raise NotImplementedError


class SolverSurrogate(Surrogate):
    """The reference solver itself"""
    name = 'solver'

    def __init__(self, stepper):
        self.stepper = stepper

    def step(self, states, t, member_seeds):
        return self.stepper.advance(states, 1)


class IdentitySurrogate(Surrogate):
    """Persistence forecast u_t = u_0"""
    name = 'identity'

    def step(self, states, t, member_seeds):
        return states.copy()


class FnoSurrogate(Surrogate):
    name = 'fno'

    def __init__(self, model, normalization):
        self.model = model
        self.normalization = normalization

    def step(self, states, t, member_seeds):
        prediction = self.model.predict(self.normalization.encode_input(states))
        return self.normalization.decode_output(prediction)


class DllSurrogate(Surrogate):
    """One ODE sample per member per step, each member on its own stream"""
    stochastic = True
    name = 'dll'

    def __init__(self, head, encoder, normalization, sampler_steps=SAMPLER_STEPS):
        self.head = head
        self.encoder = encoder
        self.normalization = normalization
        self.sampler_steps = sampler_steps

    def step(self, states, t, member_seeds):
        a = self.normalization.encode_input(states)
        fields = sample_members(a, self.head, self.encoder, self.sampler_steps, member_seeds, stream_index=t)
        return self.normalization.decode_output(fields)


# ============= HARNESS =============

def closed_loop(model, u0, truth, cfg, index=0):
    """
    Roll a surrogate forward from u0 and score it against truth

    Args:
        model (Surrogate): one-step map on ensembles
        u0 (ndarray): initial field (*spatial)
        truth (ndarray): (T + 1, *spatial) reference trajectory, truth[0] = u0
        cfg (RolloutConfig): horizon, ensemble size, seed
        index (int): trajectory index, keys the member streams

    Returns:
        RolloutRecord: covers min(horizon, T) steps, fewer if a state went non-finite
    """
    u0 = np.asarray(u0, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if truth.shape[1:] != u0.shape:
        raise UsageError(f'truth frames {truth.shape[1:]} do not match the initial field {u0.shape}')
    horizon = min(cfg.horizon, truth.shape[0] - 1)
    members = cfg.ensemble_size if model.stochastic else 1
    member_seeds = [rng_streams.child_seed(cfg.seed, 'rollout', index, k) for k in range(members)]

    record = RolloutRecord(index=index)
    states = np.repeat(u0[None], members, axis=0)
    if 0 in cfg.snapshot_steps:
        record.snapshots[0] = states.copy()
    for t in range(1, horizon + 1):
        states = np.asarray(model.step(states, t, member_seeds), dtype=float)
        if not np.isfinite(states).all():
            record.truncated = True
            record.truncated_at = t
            print(f"⚠️ Rollout {index} ({model.name}) went non-finite at step {t}; truncated")
            break
        record.add_step(t, states, truth[t])
        if t in cfg.snapshot_steps:
            record.snapshots[t] = states.copy()
    return record


def run_rollouts(model, dataset, cfg, verbose=False):
    """Closed-loop rollouts over every trajectory of a trajectory split"""
    if dataset.kind != 'trajectories':
        raise PrerequisiteError(f'Rollouts need a trajectory dataset, {dataset.system}/{dataset.split} holds pairs')
    records = []
    for i in range(dataset.n_items):
        record = closed_loop(model, dataset.outputs[i, 0], dataset.outputs[i], cfg, index=i)
        records.append(record)
        if verbose:
            avg = record.averages
            print(f"📊 {model.name} trajectory {i}: NRMSE {avg['NRMSE']:.4f} CRPS {avg['CRPS']:.4f}"
                  f" SSR {avg['SSR']:.4f}")
    return records


def aggregate(records, meta=None):
    """
    Trajectory means then set means, plus per-step curves

    Returns:
        tuple: (MetricReport with one row per trajectory, list of per-step curve rows)
    """
    if not records:
        raise UsageError('aggregate needs at least one rollout record')
    report = metrics.MetricReport(meta=dict(meta or {}))
    for record in records:
        report.add(record.index, record.averages, record.flags())

    longest = max(record.length for record in records)
    curves = []
    for position in range(longest):
        alive = [r for r in records if r.length > position]
        row = {'step': alive[0].steps[position], 'count': len(alive)}
        for name in ROLLOUT_METRICS:
            row[name] = float(np.mean([r.curve(name)[position] for r in alive]))
        curves.append(row)
    return report, curves


def step_trend(curves, name='NRMSE'):
    """Spearman correlation of a per-step curve against the step index"""
    steps = [row['step'] for row in curves]
    values = [row[name] for row in curves]
    if len(steps) < 2:
        return float('nan')
    return float(stats.spearmanr(steps, values)[0])


# ============= CSV =============

def write_record_csv(path, record):
    """Per-step scores of one rollout"""
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['step'] + list(ROLLOUT_METRICS))
        for row in zip(record.steps, record.nrmse, record.crps, record.ssr):
            writer.writerow(row)


def write_curves_csv(path, curves_by_model):
    """
    Per-step curves of several surrogates on one shared step axis

    Args:
        curves_by_model (dict): model name -> curve rows from aggregate
    """
    steps = sorted({row['step'] for curves in curves_by_model.values() for row in curves})
    names = sorted(curves_by_model)
    lookup = {name: {row['step']: row for row in curves_by_model[name]} for name in names}
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['step'] + [f'{name}_{metric}' for name in names for metric in ROLLOUT_METRICS])
        for step in steps:
            cells = [step]
            for name in names:
                row = lookup[name].get(step)
                cells.extend(row[metric] if row else '' for metric in ROLLOUT_METRICS)
            writer.writerow(cells)
