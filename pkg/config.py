"""
Configuration file for the DLL laboratory
Loads environment variables into the process Config classes and parses the
flat KEY=value run configurations layered over the desk / paper presets.
"""
import os
import sys

from dotenv import dotenv_values, load_dotenv

load_dotenv()

# Thread counts must be pinned before numpy loads its BLAS for runs to be bit-reproducible
_THREADS = os.getenv('DLL_NUM_THREADS', '1')
for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_var, _THREADS)
# False when numpy was imported ahead of this module and its BLAS ignored the pins
THREADS_PINNED_EARLY = 'numpy' not in sys.modules

from models.training import TrainSettings  # noqa: E402
from solvers.datasets import STOCHASTIC_SYSTEMS, SYSTEM_IDS, SystemSettings  # noqa: E402
from utils.digest import digest_text, format_digest  # noqa: E402
from utils.errors import ConfigurationError  # noqa: E402


class Config:
    """Base configuration class"""

    # Run registry
    SQLALCHEMY_DATABASE_URI = os.getenv('SQLALCHEMY_DATABASE_URI', 'sqlite:///registry.db')
    SQLALCHEMY_TRACK_MODIFICATIONS = False
    SQLALCHEMY_ECHO = False

    # Laboratory settings
    DLL_OUTPUT_DIR = os.getenv('DLL_OUTPUT_DIR', 'runs')
    DLL_NUM_THREADS = int(_THREADS)
    DLL_PRECISION = os.getenv('DLL_PRECISION', 'float64')
    DLL_LOG_EVERY = int(os.getenv('DLL_LOG_EVERY', 10))
    DEBUG = os.getenv('DEBUG', 'False').lower() == 'true'


class DevelopmentConfig(Config):
    """Development environment configuration"""
    DEBUG = True


class ProductionConfig(Config):
    """Production environment configuration"""
    DEBUG = False


class TestingConfig(Config):
    """Testing environment configuration"""
    TESTING = True
    SQLALCHEMY_DATABASE_URI = 'sqlite:///:memory:'
    DLL_LOG_EVERY = 1


config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}


# ============= RUN CONFIGURATION =============

RUN_KEYS = {
    'SYSTEM': str,
    'SCALE': str,
    'SEED': int,
    'GRID_N': int,
    'DATA_TRAIN': int,
    'DATA_EVAL_INPUTS': int,
    'DATA_REALIZATIONS': int,
    'DATA_TRAIN_HORIZON': int,
    'DATA_EVAL_HORIZON': int,
    'DATA_WARMUP': int,
    'DATA_NOISE_SIGMA': float,
    'DATA_IC_DECAY': float,
    'DATA_IC_AMPLITUDE': float,
    'DATA_SOURCE_MIX': float,
    'DATA_DTYPE': str,
    'SOLVER_SUBSTEP': float,
    'SOLVER_CG_TOLERANCE': float,
    'SOLVER_CG_MAX_ITERATIONS': int,
    'MODEL_LATENT_DIM': int,
    'MODEL_WIDTH': int,
    'MODEL_MODES': int,
    'MODEL_LAYERS': int,
    'MODEL_HIDDEN': int,
    'OPTIM_LR': float,
    'OPTIM_WEIGHT_DECAY': float,
    'OPTIM_CLIP': float,
    'OPTIM_EMA_DECAY': float,
    'TRAIN_ENCODER_EPOCHS': int,
    'TRAIN_DLL_EPOCHS': int,
    'TRAIN_FNO_EPOCHS': int,
    'TRAIN_BATCH_SIZE': int,
    'SAMPLER_STEPS': int,
    'SAMPLER_ENSEMBLE': int,
    'EVAL_PROJECTIONS': int,
    'EVAL_ROLLOUT_HORIZON': int,
}

SCALES = ('desk', 'paper')

_COMMON = {
    'SEED': 0,
    'DATA_NOISE_SIGMA': 1.0,
    'DATA_IC_DECAY': 2.0,
    'DATA_IC_AMPLITUDE': 1.0,
    'DATA_SOURCE_MIX': 0.1,
    'DATA_DTYPE': 'float64',
    'DATA_TRAIN_HORIZON': 50,
    'DATA_EVAL_HORIZON': 100,
    'DATA_WARMUP': 100,
    'SOLVER_SUBSTEP': 0.0,
    'SOLVER_CG_TOLERANCE': 1e-6,
    'SOLVER_CG_MAX_ITERATIONS': 5000,
    'MODEL_LAYERS': 4,
    'OPTIM_LR': 1e-3,
    'OPTIM_WEIGHT_DECAY': 1e-2,
    'OPTIM_CLIP': 1.0,
    'OPTIM_EMA_DECAY': 0.999,
    'TRAIN_BATCH_SIZE': 32,
    'SAMPLER_STEPS': 10,
    'SAMPLER_ENSEMBLE': 32,
    'EVAL_PROJECTIONS': 128,
    'EVAL_ROLLOUT_HORIZON': 100,
}

# Values from the published experimental setup
_PAPER = {
    'sburgers': {'GRID_N': 256, 'DATA_TRAIN': 10_000, 'DATA_EVAL_INPUTS': 32, 'DATA_REALIZATIONS': 64},
    'darcy': {'GRID_N': 128, 'DATA_TRAIN': 10_000, 'DATA_EVAL_INPUTS': 32, 'DATA_REALIZATIONS': 64},
    'ks': {'GRID_N': 256, 'DATA_TRAIN': 1024, 'DATA_EVAL_INPUTS': 128, 'DATA_REALIZATIONS': 1},
    'kolmogorov': {'GRID_N': 128, 'DATA_TRAIN': 256, 'DATA_EVAL_INPUTS': 32, 'DATA_REALIZATIONS': 1,
                   'DATA_WARMUP': 400},
}

_DESK = {
    'sburgers': {'GRID_N': 64, 'DATA_TRAIN': 2000, 'DATA_EVAL_INPUTS': 32, 'DATA_REALIZATIONS': 64},
    'darcy': {'GRID_N': 32, 'DATA_TRAIN': 2000, 'DATA_EVAL_INPUTS': 32, 'DATA_REALIZATIONS': 64},
    'ks': {'GRID_N': 64, 'DATA_TRAIN': 64, 'DATA_EVAL_INPUTS': 16, 'DATA_REALIZATIONS': 1},
    'kolmogorov': {'GRID_N': 32, 'DATA_TRAIN': 32, 'DATA_EVAL_INPUTS': 8, 'DATA_REALIZATIONS': 1,
                   'DATA_WARMUP': 400},
}


def preset(system, scale):
    """Built-in values for one (system, scale)"""
    if system not in SYSTEM_IDS or system == 'ensemble':
        raise ConfigurationError(f'Unknown system: {system}')
    if scale not in SCALES:
        raise ConfigurationError(f'Unknown scale: {scale} (expected one of {", ".join(SCALES)})')
    values = dict(_COMMON, SYSTEM=system, SCALE=scale)
    stochastic = system in STOCHASTIC_SYSTEMS
    if scale == 'paper':
        values.update(_PAPER[system])
        values.update({'MODEL_LATENT_DIM': 64, 'MODEL_WIDTH': 64, 'MODEL_MODES': 32, 'MODEL_HIDDEN': 512})
        epochs = 100 if stochastic else 500
        values.update({'TRAIN_ENCODER_EPOCHS': epochs, 'TRAIN_DLL_EPOCHS': epochs, 'TRAIN_FNO_EPOCHS': epochs})
    else:
        values.update(_DESK[system])
        values.update({'MODEL_LATENT_DIM': 16 if system in ('sburgers', 'ks') else 32, 'MODEL_WIDTH': 32,
                       'MODEL_MODES': min(32, values['GRID_N'] // 3), 'MODEL_HIDDEN': 256})
        if stochastic:
            values.update({'TRAIN_ENCODER_EPOCHS': 20, 'TRAIN_DLL_EPOCHS': 40, 'TRAIN_FNO_EPOCHS': 20})
        else:
            values.update({'TRAIN_ENCODER_EPOCHS': 50, 'TRAIN_DLL_EPOCHS': 100, 'TRAIN_FNO_EPOCHS': 50})
    return values


def _convert(key, value):
    if key not in RUN_KEYS:
        raise ConfigurationError(f'Unknown configuration key: {key}')
    kind = RUN_KEYS[key]
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f'{key}={value!r} is not a valid {kind.__name__}') from e


class RunConfig:
    """
    Flat KEY=value run configuration

    Args:
        values (dict): fully populated key -> typed value mapping
    """

    def __init__(self, values):
        missing = sorted(set(RUN_KEYS) - set(values))
        if missing:
            raise ConfigurationError(f'Missing configuration keys: {", ".join(missing)}')
        self.values = {key: _convert(key, value) for key, value in values.items()}
        self._validate()

    @classmethod
    def load(cls, path=None, system=None, scale=None, overrides=None):
        """
        Preset, then config file, then explicit overrides

        SYSTEM and SCALE select the preset; they may come from any layer.
        """
        file_values = {}
        if path:
            if not os.path.exists(path):
                raise ConfigurationError(f'Config file not found: {path}')
            file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        for key in list(file_values) + list(overrides):
            if key not in RUN_KEYS:
                raise ConfigurationError(f'Unknown configuration key: {key}')
        system = system or overrides.get('SYSTEM') or file_values.get('SYSTEM')
        scale = scale or overrides.get('SCALE') or file_values.get('SCALE') or 'desk'
        if not system:
            raise ConfigurationError('No SYSTEM given (flag, config file or override)')
        values = preset(system, scale)
        values.update(file_values)
        values.update(overrides)
        values.update({'SYSTEM': system, 'SCALE': scale})
        return cls(values)

    def _validate(self):
        v = self.values
        if v['SYSTEM'] not in SYSTEM_IDS or v['SYSTEM'] == 'ensemble':
            raise ConfigurationError(f'Unknown system: {v["SYSTEM"]}')
        if v['DATA_DTYPE'] not in ('float64', 'float32'):
            raise ConfigurationError(f'DATA_DTYPE must be float64 or float32, got {v["DATA_DTYPE"]}')
        for key in ('GRID_N', 'DATA_TRAIN', 'DATA_EVAL_INPUTS', 'DATA_REALIZATIONS', 'MODEL_LATENT_DIM',
                    'MODEL_WIDTH', 'MODEL_MODES', 'MODEL_LAYERS', 'MODEL_HIDDEN', 'TRAIN_BATCH_SIZE',
                    'SAMPLER_STEPS', 'SAMPLER_ENSEMBLE', 'EVAL_PROJECTIONS', 'EVAL_ROLLOUT_HORIZON'):
            if v[key] < 1:
                raise ConfigurationError(f'{key} must be positive, got {v[key]}')
        if not 0.0 < v['OPTIM_EMA_DECAY'] < 1.0:
            raise ConfigurationError(f'OPTIM_EMA_DECAY must lie in (0, 1), got {v["OPTIM_EMA_DECAY"]}')
        if not 0.0 <= v['DATA_SOURCE_MIX'] <= 1.0:
            raise ConfigurationError(f'DATA_SOURCE_MIX must lie in [0, 1], got {v["DATA_SOURCE_MIX"]}')

    def __getitem__(self, key):
        return self.values[key]

    @property
    def system(self):
        return self.values['SYSTEM']

    @property
    def seed(self):
        return self.values['SEED']

    def canonical(self):
        """Sorted KEY=value lines"""
        return ''.join(f'{key}={self.values[key]!r}\n' if isinstance(self.values[key], float)
                       else f'{key}={self.values[key]}\n' for key in sorted(self.values))

    def digest(self):
        return digest_text(self.canonical())

    def write(self, directory):
        """Emit run.cfg and run.digest into an output directory"""
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, 'run.cfg'), 'w') as fh:
            fh.write(self.canonical())
        with open(os.path.join(directory, 'run.digest'), 'w') as fh:
            fh.write(format_digest(self.digest()) + '\n')

    # ============= DERIVED SETTINGS =============

    def system_settings(self):
        v = self.values
        return SystemSettings(v['SYSTEM'], v['GRID_N'], noise_sigma=v['DATA_NOISE_SIGMA'],
                              ic_decay=v['DATA_IC_DECAY'], ic_amplitude=v['DATA_IC_AMPLITUDE'],
                              train_horizon=v['DATA_TRAIN_HORIZON'], eval_horizon=v['DATA_EVAL_HORIZON'],
                              warmup=v['DATA_WARMUP'], source_mix=v['DATA_SOURCE_MIX'],
                              cg_tolerance=v['SOLVER_CG_TOLERANCE'],
                              cg_max_iterations=v['SOLVER_CG_MAX_ITERATIONS'],
                              substep=v['SOLVER_SUBSTEP'] or None)

    def train_settings(self, stage, log_every=10):
        """TrainSettings for 'encoder', 'dll' or 'fno'"""
        key = f'TRAIN_{stage.upper()}_EPOCHS'
        if key not in self.values:
            raise ConfigurationError(f'Unknown training stage: {stage}')
        v = self.values
        return TrainSettings(epochs=v[key], batch_size=v['TRAIN_BATCH_SIZE'], lr=v['OPTIM_LR'],
                             weight_decay=v['OPTIM_WEIGHT_DECAY'], clip=v['OPTIM_CLIP'],
                             ema_decay=v['OPTIM_EMA_DECAY'], log_every=log_every)
