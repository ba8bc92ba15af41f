"""
Tests for the closed-loop rollout harness
"""
import csv

import numpy as np
import pytest

from analysis import rollout
from models import dll_head
from models import operator_encoder as oe
from models.baseline import DeterministicFno
from solvers import spectral
from solvers.datasets import KIND_PAIRS, KIND_TRAJECTORIES, Normalization, TrajectorySet
from utils import rng as rng_streams
from utils.errors import ConfigurationError, PrerequisiteError, UsageError


def ks_stepper(n=32):
    return spectral.KuramotoSivashinsky(spectral.PeriodicGrid(1, n, spectral.KS_LENGTH), substeps=10)


@pytest.fixture
def ks_truth():
    stepper = ks_stepper()
    u0 = spectral.sample_initial_condition(stepper.grid, seed=0)
    return stepper.trajectory(u0, warmup=0, horizon=5)


class NoisySurrogate(rollout.Surrogate):
    """Identity plus member-seeded noise; reverse=True hands the seeds out in reverse order"""
    stochastic = True
    name = 'noisy'

    def __init__(self, scale=0.1, reverse=False):
        self.scale = scale
        self.reverse = reverse

    def step(self, states, t, member_seeds):
        seeds = member_seeds[::-1] if self.reverse else member_seeds
        noise = np.stack([rng_streams.stream(s, 'noisy', t).standard_normal(states.shape[1:]) for s in seeds])
        return states + self.scale * noise


class CollapsedSurrogate(rollout.Surrogate):
    """Generative surrogate whose members never separate"""
    stochastic = True
    name = 'collapsed'

    def step(self, states, t, member_seeds):
        return states * 0.99


class BlowUpSurrogate(rollout.Surrogate):
    name = 'blowup'

    def step(self, states, t, member_seeds):
        return np.full_like(states, np.nan) if t == 3 else states.copy()


def make_record(index, values):
    values = list(values)
    return rollout.RolloutRecord(index=index, steps=list(range(1, len(values) + 1)), nrmse=values,
                                 crps=values, ssr=values)


# ============= CONFIG =============

def test_config_validation():
    with pytest.raises(ConfigurationError):
        rollout.RolloutConfig(horizon=0)
    with pytest.raises(ConfigurationError):
        rollout.RolloutConfig(ensemble_size=0)
    assert rollout.RolloutConfig(snapshot_steps=('3', 1)).snapshot_steps == (1, 3)


# ============= CLOSED LOOP =============

def test_perfect_model_has_zero_error(ks_truth):
    cfg = rollout.RolloutConfig(horizon=5, ensemble_size=4)
    record = rollout.closed_loop(rollout.SolverSurrogate(ks_stepper()), ks_truth[0], ks_truth, cfg)
    assert record.steps == [1, 2, 3, 4, 5]
    assert max(record.nrmse) < 1e-12
    assert max(record.crps) < 1e-12
    assert not record.truncated


def test_identity_error_is_truth_drift(ks_truth):
    record = rollout.closed_loop(rollout.IdentitySurrogate(), ks_truth[0], ks_truth, rollout.RolloutConfig(horizon=5))
    drift = [np.linalg.norm(ks_truth[t] - ks_truth[0]) / np.linalg.norm(ks_truth[t]) for t in range(1, 6)]
    assert np.allclose(record.nrmse, drift, rtol=1e-10, atol=0)


def test_zero_spread_ensemble_has_zero_ssr(ks_truth):
    cfg = rollout.RolloutConfig(horizon=5, ensemble_size=4)
    record = rollout.closed_loop(CollapsedSurrogate(), ks_truth[0], ks_truth, cfg)
    assert max(record.ssr) < 1e-12


def test_generative_members_spread(ks_truth):
    cfg = rollout.RolloutConfig(horizon=5, ensemble_size=8, seed=3)
    record = rollout.closed_loop(NoisySurrogate(), ks_truth[0], ks_truth, cfg)
    assert min(record.ssr) > 0
    again = rollout.closed_loop(NoisySurrogate(), ks_truth[0], ks_truth, cfg)
    assert record.nrmse == again.nrmse and record.crps == again.crps


def test_horizon_is_capped_by_truth(ks_truth):
    record = rollout.closed_loop(rollout.IdentitySurrogate(), ks_truth[0], ks_truth, rollout.RolloutConfig(horizon=50))
    assert record.length == 5
    with pytest.raises(UsageError):
        rollout.closed_loop(rollout.IdentitySurrogate(), ks_truth[0][:8], ks_truth, rollout.RolloutConfig())


def test_non_finite_state_truncates(ks_truth):
    record = rollout.closed_loop(BlowUpSurrogate(), ks_truth[0], ks_truth, rollout.RolloutConfig(horizon=5))
    assert record.truncated and record.truncated_at == 3
    assert record.steps == [1, 2]
    assert record.flags() == ['truncated@3']
    assert np.isfinite(record.averages['NRMSE'])


def test_no_lookahead(ks_truth):
    cfg = rollout.RolloutConfig(horizon=5, ensemble_size=4)
    full = rollout.closed_loop(NoisySurrogate(), ks_truth[0], ks_truth, cfg)
    for t in range(1, 5):
        cut = rollout.closed_loop(NoisySurrogate(), ks_truth[0], ks_truth[:t + 1], cfg)
        assert cut.length == t
        assert cut.nrmse == full.nrmse[:t]
        assert cut.crps == full.crps[:t]
        assert cut.ssr == full.ssr[:t]


def test_member_order_does_not_matter(ks_truth):
    cfg = rollout.RolloutConfig(horizon=5, ensemble_size=6, seed=1)
    forward = rollout.closed_loop(NoisySurrogate(), ks_truth[0], ks_truth, cfg)
    backward = rollout.closed_loop(NoisySurrogate(reverse=True), ks_truth[0], ks_truth, cfg)
    for name in rollout.ROLLOUT_METRICS:
        assert np.allclose(forward.curve(name), backward.curve(name), rtol=1e-12, atol=1e-15)


def test_snapshots_are_kept(ks_truth):
    cfg = rollout.RolloutConfig(horizon=3, snapshot_steps=(0, 2))
    record = rollout.closed_loop(rollout.IdentitySurrogate(), ks_truth[0], ks_truth, cfg)
    assert sorted(record.snapshots) == [0, 2]
    assert record.snapshots[2].shape == (1, 32)


def test_learned_surrogates_roll_out(tiny_net):
    stepper = ks_stepper(16)
    truth = stepper.trajectory(spectral.sample_initial_condition(stepper.grid, seed=1), warmup=0, horizon=2)
    normalization = Normalization()
    cfg = rollout.RolloutConfig(horizon=2, ensemble_size=3, sampler_steps=2)

    fno = rollout.FnoSurrogate(DeterministicFno(1, width=4, modes=4, seed=0).freeze(), normalization)
    record = rollout.closed_loop(fno, truth[0], truth, cfg)
    assert record.length == 2 and max(record.ssr) == 0.0

    encoder = oe.OperatorEncoder(1, tiny_net['latent_dim'], 4, 4, seed=0).freeze()
    head = dll_head.DiffusionLastLayer(1, tiny_net['latent_dim'], 4, 4, 8, condition_dim=4, seed=0).freeze()
    dll = rollout.DllSurrogate(head, encoder, normalization, sampler_steps=2)
    first = rollout.closed_loop(dll, truth[0], truth, cfg)
    second = rollout.closed_loop(dll, truth[0], truth, cfg)
    assert first.length == 2 and min(first.ssr) > 0
    assert first.crps == second.crps


# ============= RUNS AND AGGREGATE =============

def test_run_rollouts_needs_trajectories(ks_truth):
    pairs = TrajectorySet('sburgers', KIND_PAIRS, 'eval', ks_truth[:2, :], ks_truth[None, :2].repeat(2, axis=0),
                          (spectral.KS_LENGTH,))
    with pytest.raises(PrerequisiteError):
        rollout.run_rollouts(rollout.IdentitySurrogate(), pairs, rollout.RolloutConfig())

    outputs = np.stack([ks_truth, ks_truth])
    trajectories = TrajectorySet('ks', KIND_TRAJECTORIES, 'eval', outputs[:, 0], outputs, (spectral.KS_LENGTH,))
    records = rollout.run_rollouts(rollout.IdentitySurrogate(), trajectories, rollout.RolloutConfig(horizon=3))
    assert [r.index for r in records] == [0, 1]
    assert records[0].nrmse == records[1].nrmse


def test_aggregate_single_record():
    record = make_record(0, [0.1, 0.2, 0.4])
    report, curves = rollout.aggregate([record])
    assert report.rows[0]['NRMSE'] == pytest.approx(np.mean([0.1, 0.2, 0.4]))
    assert [row['NRMSE'] for row in curves] == [0.1, 0.2, 0.4]


def test_aggregate_averages_curves():
    c = np.array([0.1, 0.3, 0.5, 0.9])
    report, curves = rollout.aggregate([make_record(0, c), make_record(1, 3 * c)])
    assert np.allclose([row['NRMSE'] for row in curves], 2 * c, rtol=1e-12)
    assert report.means['CRPS'] == pytest.approx(2 * c.mean())
    assert rollout.step_trend(curves) == pytest.approx(1.0)


def test_aggregate_keeps_truncation_flags():
    short = make_record(1, [0.5])
    short.truncated, short.truncated_at = True, 2
    report, curves = rollout.aggregate([make_record(0, [0.1, 0.2]), short])
    assert report.rows[1]['flags'] == 'truncated@2'
    assert [row['count'] for row in curves] == [2, 1]
    with pytest.raises(UsageError):
        rollout.aggregate([])


def test_csv_outputs(tmp_path):
    record = make_record(0, [0.1, 0.2])
    rollout.write_record_csv(tmp_path / 'record.csv', record)
    with open(tmp_path / 'record.csv', newline='') as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ['step', 'NRMSE', 'CRPS', 'SSR']
    assert len(rows) == 3

    _, fno_curves = rollout.aggregate([make_record(0, [0.3])])
    _, dll_curves = rollout.aggregate([record])
    rollout.write_curves_csv(tmp_path / 'curves.csv', {'fno': fno_curves, 'dll': dll_curves})
    with open(tmp_path / 'curves.csv', newline='') as fh:
        rows = list(csv.DictReader(fh))
    assert [row['step'] for row in rows] == ['1', '2']
    assert rows[1]['fno_NRMSE'] == '' and float(rows[1]['dll_NRMSE']) == 0.2
