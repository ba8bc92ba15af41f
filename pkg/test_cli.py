"""
End-to-end tests of the laboratory command group on tiny runs
"""
import csv
import os

import numpy as np
import pytest

from analysis import rollout as rollouts
from models import bundle as bundles
from models.db import Artifact, RunLog
from solvers.datasets import read_dataset


def invoke(runner, *args):
    return runner.invoke(args=[str(a) for a in args])


def read_rows(path):
    with open(path, newline='') as fh:
        return list(csv.DictReader(fh))


def mean_row(path):
    return [row for row in read_rows(path) if row['condition'] == 'mean'][0]


@pytest.fixture
def burgers_run(cli_runner, tiny_burgers_args, run_dir):
    """Generated data plus encoder, DLL and FNO checkpoints"""
    for command in ('gen', 'train-encoder', 'train-dll', 'train-fno'):
        result = invoke(cli_runner, command, *tiny_burgers_args)
        assert result.exit_code == 0, result.output
    return run_dir


# ============= GEN =============

def test_gen_is_deterministic(cli_runner, tiny_burgers_args, run_dir):
    result = invoke(cli_runner, 'gen', *tiny_burgers_args)
    assert result.exit_code == 0, result.output
    data = os.path.join(run_dir, 'data')
    first = {name: open(os.path.join(data, name), 'rb').read() for name in ('train.dlld', 'eval.dlld')}

    result = invoke(cli_runner, 'gen', *tiny_burgers_args)
    assert result.exit_code == 0, result.output
    for name, content in first.items():
        assert open(os.path.join(data, name), 'rb').read() == content

    assert os.path.exists(os.path.join(data, 'run.cfg'))
    digest = open(os.path.join(data, 'run.digest')).read().strip()
    assert len(digest) == 16
    dataset = read_dataset(os.path.join(data, 'eval.dlld'))
    assert dataset.system == 'sburgers' and dataset.spatial_shape == (16,) and dataset.realizations == 3


def test_unknown_key_is_a_configuration_error(cli_runner, tiny_burgers_args):
    result = invoke(cli_runner, 'gen', *tiny_burgers_args, '--set', 'BOGUS=1')
    assert result.exit_code == 2
    assert 'BOGUS' in result.output
    assert invoke(cli_runner, 'gen', '--set', 'GRID_N=16').exit_code == 2


def test_registry_tracks_runs(cli_runner, tiny_burgers_args, run_dir):
    invoke(cli_runner, 'gen', *tiny_burgers_args)
    invoke(cli_runner, 'gen', *tiny_burgers_args, '--set', 'BOGUS=1')
    runs = RunLog.query.order_by(RunLog.id).all()
    assert [r.status for r in runs] == ['succeeded', 'failed']
    assert runs[0].config_digest == open(os.path.join(run_dir, 'data', 'run.digest')).read().strip()
    assert runs[1].error_category == 'config'
    datasets = Artifact.query.filter_by(kind='dataset').all()
    assert len(datasets) == 2 and all(a.run_id == runs[0].id for a in datasets)


# ============= TRAINING =============

def test_train_dll_needs_an_encoder(cli_runner, tiny_burgers_args):
    assert invoke(cli_runner, 'gen', *tiny_burgers_args).exit_code == 0
    result = invoke(cli_runner, 'train-dll', *tiny_burgers_args)
    assert result.exit_code == 5
    assert 'train-encoder' in result.output


def test_training_without_data_is_a_prerequisite_error(cli_runner, tiny_burgers_args):
    assert invoke(cli_runner, 'train-encoder', *tiny_burgers_args).exit_code == 5


def test_checkpoints_are_deterministic(cli_runner, tiny_burgers_args, run_dir):
    assert invoke(cli_runner, 'gen', *tiny_burgers_args).exit_code == 0
    path = os.path.join(run_dir, 'encoder', 'encoder.dllm')
    assert invoke(cli_runner, 'train-encoder', *tiny_burgers_args).exit_code == 0
    first = open(path, 'rb').read()
    assert invoke(cli_runner, 'train-encoder', *tiny_burgers_args).exit_code == 0
    assert open(path, 'rb').read() == first


def test_single_precision_training(app, cli_runner, tiny_burgers_args, run_dir):
    assert invoke(cli_runner, 'gen', *tiny_burgers_args).exit_code == 0
    app.config['DLL_PRECISION'] = 'float32'
    try:
        assert invoke(cli_runner, 'train-fno', *tiny_burgers_args).exit_code == 0
        checkpoint = bundles.read_bundle(os.path.join(run_dir, 'fno', 'fno.dllm'))
        assert checkpoint.meta['precision'] == 'float32'
        app.config['DLL_PRECISION'] = 'float16'
        assert invoke(cli_runner, 'train-fno', *tiny_burgers_args).exit_code == 2
    finally:
        app.config['DLL_PRECISION'] = 'float64'


# ============= EVALUATION =============

def test_tiny_pipeline_evaluates(cli_runner, tiny_burgers_args, burgers_run):
    result = invoke(cli_runner, 'eval', *tiny_burgers_args, '--self-eval')
    assert result.exit_code == 0, result.output
    truth = mean_row(os.path.join(burgers_run, 'eval', 'truth_metrics.csv'))
    assert float(truth['ED']) == 0.0 and float(truth['SWD']) == 0.0

    result = invoke(cli_runner, 'eval', *tiny_burgers_args, '--reconstruction', '--dump-fields')
    assert result.exit_code == 0, result.output
    directory = os.path.join(burgers_run, 'eval')
    fno = mean_row(os.path.join(directory, 'fno_metrics.csv'))
    assert abs(float(fno['NRMSE_s']) - 1.0) < 1e-9
    dll_rows = read_rows(os.path.join(directory, 'dll_metrics.csv'))
    assert len(dll_rows) == 3 and dll_rows[0]['K'] == '4'
    assert {row['model'] for row in read_rows(os.path.join(directory, 'summary.csv'))} == {'dll', 'fno'}
    assert np.isfinite(float(read_rows(os.path.join(directory, 'reconstruction.csv'))[0]['nrmse']))
    maps = read_dataset(os.path.join(directory, 'dll_fields.dlld'))
    assert maps.outputs.shape == (2, 2, 16)


def test_unknown_model_name(cli_runner, tiny_burgers_args, burgers_run):
    assert invoke(cli_runner, 'eval', *tiny_burgers_args, '--models', 'gan').exit_code == 2


def test_tampered_checkpoint_is_rejected(cli_runner, tiny_burgers_args, burgers_run):
    path = os.path.join(burgers_run, 'dll', 'dll.dllm')
    content = bytearray(open(path, 'rb').read())
    content[-3] ^= 0xFF
    open(path, 'wb').write(bytes(content))
    assert invoke(cli_runner, 'eval', *tiny_burgers_args, '--models', 'dll').exit_code == 3

    content[:4] = b'XXXX'
    open(path, 'wb').write(bytes(content))
    assert invoke(cli_runner, 'eval', *tiny_burgers_args, '--models', 'dll').exit_code == 6


def test_checkpoint_from_other_data_is_rejected(cli_runner, tiny_burgers_args, burgers_run):
    assert invoke(cli_runner, 'gen', *tiny_burgers_args, '--seed', 5).exit_code == 0
    assert invoke(cli_runner, 'eval', *tiny_burgers_args, '--seed', 5, '--models', 'fno').exit_code == 3


def test_kl_report(cli_runner, tiny_burgers_args, run_dir):
    assert invoke(cli_runner, 'gen', *tiny_burgers_args).exit_code == 0
    result = invoke(cli_runner, 'kl-report', *tiny_burgers_args)
    assert result.exit_code == 0, result.output
    tail = read_rows(os.path.join(run_dir, 'kl', 'kl_tail.csv'))
    assert sorted({int(row['rank']) for row in tail}) == [1, 2, 4]
    assert all(float(row['optimal_error']) <= float(row['trace']) + 1e-12 for row in tail)


# ============= ROLLOUT =============

def test_perfect_rollout_on_ks(cli_runner, tiny_ks_args, run_dir):
    assert invoke(cli_runner, 'gen', *tiny_ks_args).exit_code == 0
    result = invoke(cli_runner, 'rollout', *tiny_ks_args, '--perfect', '--identity', '--models', '',
                    '--snapshot-steps', '0,2')
    assert result.exit_code == 0, result.output
    directory = os.path.join(run_dir, 'rollout')
    steps = read_rows(os.path.join(directory, 'solver_steps.csv'))
    assert len(steps) == 3
    assert max(float(row['NRMSE']) for row in steps) < 1e-10
    curves = read_rows(os.path.join(directory, 'curves.csv'))
    assert [row['step'] for row in curves] == ['1', '2', '3']
    assert 'identity_NRMSE' in curves[0] and 'solver_NRMSE' in curves[0]
    snapshot = read_dataset(os.path.join(directory, 'identity_snapshot_2.dlld'))
    assert snapshot.outputs.shape == (1, 1, 16)


def test_rollout_of_trained_models(cli_runner, tiny_ks_args, run_dir):
    for command in ('gen', 'train-encoder', 'train-dll', 'train-fno'):
        assert invoke(cli_runner, command, *tiny_ks_args).exit_code == 0
    result = invoke(cli_runner, 'rollout', *tiny_ks_args, '--horizon', 2)
    assert result.exit_code == 0, result.output
    summary = mean_row(os.path.join(run_dir, 'rollout', 'dll_summary.csv'))
    assert float(summary['SSR']) > 0
    assert float(mean_row(os.path.join(run_dir, 'rollout', 'fno_summary.csv'))['SSR']) == 0.0


def test_rollout_needs_trajectories(cli_runner, tiny_burgers_args):
    assert invoke(cli_runner, 'gen', *tiny_burgers_args).exit_code == 0
    assert invoke(cli_runner, 'rollout', *tiny_burgers_args, '--perfect', '--models', '').exit_code == 5


def test_rollout_needs_a_surrogate(cli_runner, tiny_ks_args):
    assert invoke(cli_runner, 'gen', *tiny_ks_args).exit_code == 0
    assert invoke(cli_runner, 'rollout', *tiny_ks_args, '--models', '').exit_code == 2


# ============= OTHER SYSTEMS =============

def test_darcy_pipeline_evaluates(cli_runner, tiny_darcy_args, run_dir):
    for command in ('gen', 'train-encoder', 'train-dll', 'train-fno'):
        result = invoke(cli_runner, command, *tiny_darcy_args)
        assert result.exit_code == 0, result.output
    dataset = read_dataset(os.path.join(run_dir, 'data', 'eval.dlld'))
    assert dataset.system == 'darcy' and dataset.spatial_shape == (16, 16) and dataset.realizations == 3

    result = invoke(cli_runner, 'eval', *tiny_darcy_args)
    assert result.exit_code == 0, result.output
    directory = os.path.join(run_dir, 'eval')
    dll_rows = read_rows(os.path.join(directory, 'dll_metrics.csv'))
    assert len(dll_rows) == 3 and 'STD_CORR' in dll_rows[0]
    assert -1.0 <= float(mean_row(os.path.join(directory, 'dll_metrics.csv'))['STD_CORR']) <= 1.0
    fno = mean_row(os.path.join(directory, 'fno_metrics.csv'))
    assert float(fno['STD_CORR']) == 0.0
    assert abs(float(fno['NRMSE_s']) - 1.0) < 1e-9
    assert 'STD_CORR' in read_rows(os.path.join(directory, 'summary.csv'))[0]


def test_kolmogorov_rollout(cli_runner, tiny_kolmogorov_args, run_dir):
    for command in ('gen', 'train-encoder', 'train-dll', 'train-fno'):
        result = invoke(cli_runner, command, *tiny_kolmogorov_args)
        assert result.exit_code == 0, result.output
    result = invoke(cli_runner, 'rollout', *tiny_kolmogorov_args, '--horizon', 2, '--perfect')
    assert result.exit_code == 0, result.output
    directory = os.path.join(run_dir, 'rollout')
    curves = read_rows(os.path.join(directory, 'curves.csv'))
    assert [row['step'] for row in curves] == ['1', '2']
    assert max(float(row['solver_NRMSE']) for row in curves) < 1e-10
    assert float(mean_row(os.path.join(directory, 'dll_summary.csv'))['SSR']) > 0
    assert float(mean_row(os.path.join(directory, 'fno_summary.csv'))['SSR']) == 0.0


def test_single_heldout_trajectory_is_a_configuration_error(cli_runner, tiny_ks_args):
    result = invoke(cli_runner, 'gen', *tiny_ks_args, '--set', 'DATA_EVAL_INPUTS=1')
    assert result.exit_code == 2
    assert 'held-out trajectories' in result.output


# ============= MAINTENANCE =============

def test_quick_selfcheck(cli_runner):
    result = invoke(cli_runner, 'selfcheck', '--quick')
    assert result.exit_code == 0, result.output


def test_init_db(cli_runner):
    result = invoke(cli_runner, 'init-db')
    assert result.exit_code == 0
    assert 'created' in result.output


# ============= DESK RUNS =============

DESK_SEEDS = (0, 1, 2)


def desk_run(runner, root, system, seed, final=('eval',)):
    """Generate, train all three stages and run the final command at desk scale"""
    args = ['--system', system, '--scale', 'desk', '--seed', seed, '--out', os.path.join(root, f's{seed}')]
    for command in ('gen', 'train-encoder', 'train-dll', 'train-fno'):
        result = invoke(runner, command, *args)
        assert result.exit_code == 0, result.output
    result = invoke(runner, *final, *args)
    assert result.exit_code == 0, result.output
    return os.path.join(root, f's{seed}')


@pytest.mark.slow
def test_desk_burgers_dll_beats_fno(cli_runner, run_dir):
    sharp_spread = 0
    for seed in DESK_SEEDS:
        directory = os.path.join(desk_run(cli_runner, run_dir, 'sburgers', seed), 'eval')
        dll = mean_row(os.path.join(directory, 'dll_metrics.csv'))
        fno = mean_row(os.path.join(directory, 'fno_metrics.csv'))
        assert float(dll['ED']) < 0.5 * float(fno['ED']), f'seed {seed}'
        assert float(fno['NRMSE_s']) == pytest.approx(1.0)
        sharp_spread += float(dll['NRMSE_s']) < 0.6
    assert sharp_spread >= 2


@pytest.mark.slow
def test_desk_darcy_dll_beats_fno(cli_runner, run_dir):
    for seed in DESK_SEEDS:
        directory = os.path.join(desk_run(cli_runner, run_dir, 'darcy', seed), 'eval')
        dll = mean_row(os.path.join(directory, 'dll_metrics.csv'))
        fno = mean_row(os.path.join(directory, 'fno_metrics.csv'))
        assert float(dll['ED']) < float(fno['ED']), f'seed {seed}'
        assert float(dll['STD_CORR']) > 0.3, f'seed {seed}'


@pytest.mark.slow
def test_desk_ks_rollout_spread(cli_runner, run_dir):
    root = desk_run(cli_runner, run_dir, 'ks', 0, final=('rollout', '--trajectories', 8))
    directory = os.path.join(root, 'rollout')
    dll = mean_row(os.path.join(directory, 'dll_summary.csv'))
    fno = mean_row(os.path.join(directory, 'fno_summary.csv'))
    assert 0.3 < float(dll['SSR']) < 1.5
    assert float(dll['CRPS']) < float(fno['CRPS'])
    curve = [{'step': int(row['step']), 'NRMSE': float(row['NRMSE'])}
             for row in read_rows(os.path.join(directory, 'dll_steps.csv'))]
    assert rollouts.step_trend(curve) > 0.5
