"""
Shared pytest fixtures
Seeded random streams, tiny network sizes, the Flask app in testing mode with
an in-memory registry, and the --runslow switch for training-based runs.
"""
import os

os.environ['DLL_ENV'] = 'testing'
os.environ.setdefault('DLL_NUM_THREADS', '1')

import config  # noqa: E402,F401  pins BLAS threads before numpy loads
import pytest  # noqa: E402

from utils import rng as rng_streams  # noqa: E402

# Several optimizer steps per epoch and a short EMA so a few epochs move the
# held-out loss below its value at initialization
TINY_OPTIM = ['--set', 'TRAIN_BATCH_SIZE=2', '--set', 'OPTIM_LR=3e-3', '--set', 'OPTIM_EMA_DECAY=0.5']


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run training-based acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return rng_streams.stream(1234, 'tests')


@pytest.fixture
def tiny_net():
    """Network sizes small enough for finite differences and quick training"""
    return {'width': 8, 'modes': 4, 'latent_dim': 4, 'hidden': 16}


@pytest.fixture
def app(tmp_path):
    from app import app as flask_app
    from models.db import db

    flask_app.config['DLL_OUTPUT_DIR'] = str(tmp_path / 'runs')
    with flask_app.app_context():
        db.create_all()
        yield flask_app
        db.session.remove()
        db.drop_all()


@pytest.fixture
def cli_runner(app):
    return app.test_cli_runner()


@pytest.fixture
def run_dir(tmp_path):
    return str(tmp_path / 'run')


@pytest.fixture
def tiny_burgers_args(run_dir):
    """gen/train flags for a stochastic Burgers run that finishes in seconds"""
    return ['--system', 'sburgers', '--out', run_dir,
            '--set', 'GRID_N=16', '--set', 'DATA_TRAIN=4', '--set', 'DATA_EVAL_INPUTS=2',
            '--set', 'DATA_REALIZATIONS=3', '--set', 'SOLVER_SUBSTEP=0.01',
            '--set', 'MODEL_LATENT_DIM=4', '--set', 'MODEL_WIDTH=4', '--set', 'MODEL_MODES=4',
            '--set', 'MODEL_HIDDEN=8', '--set', 'TRAIN_ENCODER_EPOCHS=3', '--set', 'TRAIN_DLL_EPOCHS=2',
            '--set', 'TRAIN_FNO_EPOCHS=1', '--set', 'SAMPLER_ENSEMBLE=4', '--set', 'EVAL_PROJECTIONS=8',
            ] + TINY_OPTIM


@pytest.fixture
def tiny_ks_args(run_dir):
    """gen/train flags for a short Kuramoto-Sivashinsky trajectory run"""
    return ['--system', 'ks', '--out', run_dir,
            '--set', 'GRID_N=16', '--set', 'DATA_TRAIN=2', '--set', 'DATA_EVAL_INPUTS=2',
            '--set', 'DATA_WARMUP=1', '--set', 'DATA_TRAIN_HORIZON=3', '--set', 'DATA_EVAL_HORIZON=3',
            '--set', 'MODEL_LATENT_DIM=4', '--set', 'MODEL_WIDTH=4', '--set', 'MODEL_MODES=4',
            '--set', 'MODEL_HIDDEN=8', '--set', 'TRAIN_ENCODER_EPOCHS=3', '--set', 'TRAIN_DLL_EPOCHS=1',
            '--set', 'TRAIN_FNO_EPOCHS=1', '--set', 'SAMPLER_ENSEMBLE=2', '--set', 'EVAL_PROJECTIONS=8',
            ] + TINY_OPTIM


@pytest.fixture
def tiny_darcy_args(run_dir):
    """gen/train flags for a 16x16 Darcy run with three permeability realizations per source"""
    return ['--system', 'darcy', '--out', run_dir,
            '--set', 'GRID_N=16', '--set', 'DATA_TRAIN=4', '--set', 'DATA_EVAL_INPUTS=2',
            '--set', 'DATA_REALIZATIONS=3',
            '--set', 'MODEL_LATENT_DIM=4', '--set', 'MODEL_WIDTH=4', '--set', 'MODEL_MODES=4',
            '--set', 'MODEL_HIDDEN=8', '--set', 'TRAIN_ENCODER_EPOCHS=3', '--set', 'TRAIN_DLL_EPOCHS=2',
            '--set', 'TRAIN_FNO_EPOCHS=1', '--set', 'SAMPLER_ENSEMBLE=4', '--set', 'EVAL_PROJECTIONS=8',
            ] + TINY_OPTIM


@pytest.fixture
def tiny_kolmogorov_args(run_dir):
    """gen/train flags for a short 16x16 Kolmogorov trajectory run"""
    return ['--system', 'kolmogorov', '--out', run_dir,
            '--set', 'GRID_N=16', '--set', 'DATA_TRAIN=2', '--set', 'DATA_EVAL_INPUTS=2',
            '--set', 'DATA_WARMUP=1', '--set', 'DATA_TRAIN_HORIZON=3', '--set', 'DATA_EVAL_HORIZON=3',
            '--set', 'MODEL_LATENT_DIM=4', '--set', 'MODEL_WIDTH=4', '--set', 'MODEL_MODES=4',
            '--set', 'MODEL_HIDDEN=8', '--set', 'TRAIN_ENCODER_EPOCHS=3', '--set', 'TRAIN_DLL_EPOCHS=1',
            '--set', 'TRAIN_FNO_EPOCHS=1', '--set', 'SAMPLER_ENSEMBLE=2', '--set', 'EVAL_PROJECTIONS=8',
            ] + TINY_OPTIM
