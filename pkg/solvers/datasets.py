"""
Datasets for the four benchmark systems
TrajectorySet containers, training-split normalization, the DLLD binary file
format and generate_pairs, which drives the solvers to build every split.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from solvers import darcy, spectral
from utils import rng as rng_streams
from utils.digest import digest_payload, format_digest
from utils.errors import ArtifactFormatError, ConfigurationError, DigestMismatchError

MAGIC = b'DLLD'
FORMAT_VERSION = 1

SYSTEM_IDS = {'sburgers': 1, 'darcy': 2, 'ks': 3, 'kolmogorov': 4, 'ensemble': 5}
SYSTEM_NAMES = {v: k for k, v in SYSTEM_IDS.items()}
STOCHASTIC_SYSTEMS = ('sburgers', 'darcy')
DETERMINISTIC_SYSTEMS = ('ks', 'kolmogorov')

DTYPE_CODES = {np.dtype('<f8'): 0, np.dtype('<f4'): 1}
DTYPE_FROM_CODE = {0: np.dtype('<f8'), 1: np.dtype('<f4')}

KIND_PAIRS = 'pairs'
KIND_TRAJECTORIES = 'trajectories'
KIND_CODES = {KIND_PAIRS: 0, KIND_TRAJECTORIES: 1}
SPLIT_CODES = {'train': 0, 'eval': 1, 'val': 2, 'test': 3, 'samples': 4, 'snapshot': 5}
SPLIT_NAMES = {v: k for k, v in SPLIT_CODES.items()}

# magic, version, system, dtype, kind, split, ndim, n_items, n_outputs, digest
_HEADER = struct.Struct('<4sIIBBBIIIQ')


# ============= CONTAINERS =============

@dataclass
class Normalization:
    """Gaussian normalization statistics (computed on the training split)"""
    input_mean: float = 0.0
    input_std: float = 1.0
    output_mean: float = 0.0
    output_std: float = 1.0

    @classmethod
    def fit(cls, inputs, outputs):
        return cls(float(np.mean(inputs)), float(np.std(inputs)) or 1.0,
                   float(np.mean(outputs)), float(np.std(outputs)) or 1.0)

    def as_array(self):
        return np.array([self.input_mean, self.input_std, self.output_mean, self.output_std])

    @classmethod
    def from_array(cls, values):
        return cls(*[float(v) for v in values])

    def encode_input(self, a):
        return (a - self.input_mean) / self.input_std

    def encode_output(self, u):
        return (u - self.output_mean) / self.output_std

    def decode_output(self, u):
        return u * self.output_std + self.output_mean


@dataclass
class TrajectorySet:
    """
    Condition-target data for one split

    pairs:        inputs (M, *spatial), outputs (M, R, *spatial), R realizations per input
    trajectories: inputs (M, *spatial) = outputs[:, 0], outputs (M, T + 1, *spatial)
    """
    system: str
    kind: str
    split: str
    inputs: np.ndarray
    outputs: np.ndarray
    lengths: tuple
    normalization: Normalization = field(default_factory=Normalization)
    warmup: int = 0
    config_digest: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ConfigurationError('inputs and outputs disagree on the number of items')
        if self.inputs.shape[1:] != self.outputs.shape[2:]:
            raise ConfigurationError(f'field shapes disagree: {self.inputs.shape} vs {self.outputs.shape}')

    @property
    def spatial_shape(self):
        return self.inputs.shape[1:]

    @property
    def n_items(self):
        return self.inputs.shape[0]

    @property
    def realizations(self):
        return self.outputs.shape[1] if self.kind == KIND_PAIRS else 1

    @property
    def horizon(self):
        return self.outputs.shape[1] - 1 if self.kind == KIND_TRAJECTORIES else 1

    @property
    def cell_volume(self):
        return float(np.prod([length / (n - 1 if self.system == 'darcy' else n)
                              for length, n in zip(self.lengths, self.spatial_shape)]))

    def training_pairs(self):
        """Flatten into one-step (input, target) pairs"""
        if self.kind == KIND_PAIRS:
            inputs = np.repeat(self.inputs, self.realizations, axis=0)
            return inputs, self.outputs.reshape((-1,) + self.spatial_shape)
        inputs = self.outputs[:, :-1].reshape((-1,) + self.spatial_shape)
        targets = self.outputs[:, 1:].reshape((-1,) + self.spatial_shape)
        return inputs, targets

    def subset(self, indices):
        return TrajectorySet(self.system, self.kind, self.split, self.inputs[indices], self.outputs[indices],
                             self.lengths, self.normalization, self.warmup, self.config_digest, dict(self.meta))

    def summary(self):
        stats = {'system': self.system, 'split': self.split, 'items': self.n_items,
                 'grid': 'x'.join(str(s) for s in self.spatial_shape)}
        if self.kind == KIND_PAIRS:
            stats['realizations'] = self.realizations
            if self.realizations > 1:
                stats['mean_pointwise_std'] = float(self.outputs.std(axis=1).mean())
                stats['min_pointwise_std'] = float(self.outputs.std(axis=1).min())
        else:
            stats['horizon'] = self.horizon
        stats['digest'] = format_digest(self.config_digest)
        return stats


# ============= FILE FORMAT =============

def write_dataset(path, dataset, dtype=np.float64):
    """Write a TrajectorySet in the DLLD little-endian format"""
    dtype = np.dtype(dtype).newbyteorder('<')
    sizes = dataset.spatial_shape
    meta = dict(dataset.meta, kind=dataset.kind, warmup=dataset.warmup)
    meta_bytes = json.dumps(meta, sort_keys=True).encode('utf-8')
    norm = dataset.normalization.as_array().astype('<f8')
    with open(path, 'wb') as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, SYSTEM_IDS[dataset.system], DTYPE_CODES[dtype],
                              KIND_CODES[dataset.kind], SPLIT_CODES[dataset.split], len(sizes),
                              dataset.n_items, dataset.outputs.shape[1], dataset.config_digest))
        fh.write(np.asarray(sizes, dtype='<u4').tobytes())
        fh.write(np.asarray(dataset.lengths, dtype='<f8').tobytes())
        fh.write(struct.pack('<I', norm.size))
        fh.write(norm.tobytes())
        fh.write(struct.pack('<I', len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(np.ascontiguousarray(dataset.inputs, dtype=dtype).tobytes())
        fh.write(np.ascontiguousarray(dataset.outputs, dtype=dtype).tobytes())


def _take(buffer, offset, count):
    if offset + count > len(buffer):
        raise ArtifactFormatError('Dataset file is truncated')
    return buffer[offset:offset + count], offset + count


def read_dataset(path, expected_digest=None):
    """Read a DLLD file; optionally insist on a config digest"""
    try:
        with open(path, 'rb') as fh:
            buffer = fh.read()
    except FileNotFoundError as e:
        raise ArtifactFormatError(f'Dataset file not found: {path}') from e

    raw, offset = _take(buffer, 0, _HEADER.size)
    magic, version, system_id, dtype_code, kind_code, split_code, ndim, n_items, n_outputs, digest = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ArtifactFormatError(f'{path}: not a DLLD file (magic {magic!r})')
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f'{path}: unsupported format version {version}')
    if system_id not in SYSTEM_NAMES or dtype_code not in DTYPE_FROM_CODE:
        raise ArtifactFormatError(f'{path}: unknown system id {system_id} or dtype code {dtype_code}')
    if expected_digest is not None and digest != expected_digest:
        raise DigestMismatchError(f'{path}: config digest {format_digest(digest)} '
                                  f'does not match expected {format_digest(expected_digest)}')

    raw, offset = _take(buffer, offset, 4 * ndim)
    sizes = tuple(int(s) for s in np.frombuffer(raw, dtype='<u4'))
    raw, offset = _take(buffer, offset, 8 * ndim)
    lengths = tuple(float(v) for v in np.frombuffer(raw, dtype='<f8'))
    raw, offset = _take(buffer, offset, 4)
    (n_norm,) = struct.unpack('<I', raw)
    raw, offset = _take(buffer, offset, 8 * n_norm)
    normalization = Normalization.from_array(np.frombuffer(raw, dtype='<f8'))
    raw, offset = _take(buffer, offset, 4)
    (meta_len,) = struct.unpack('<I', raw)
    raw, offset = _take(buffer, offset, meta_len)
    meta = json.loads(raw.decode('utf-8'))

    dtype = DTYPE_FROM_CODE[dtype_code]
    field_size = int(np.prod(sizes))
    raw, offset = _take(buffer, offset, n_items * field_size * dtype.itemsize)
    inputs = np.frombuffer(raw, dtype=dtype).reshape((n_items,) + sizes).astype(np.float64)
    raw, offset = _take(buffer, offset, n_items * n_outputs * field_size * dtype.itemsize)
    outputs = np.frombuffer(raw, dtype=dtype).reshape((n_items, n_outputs) + sizes).astype(np.float64)
    if offset != len(buffer):
        raise ArtifactFormatError(f'{path}: {len(buffer) - offset} trailing bytes')

    kind = meta.pop('kind')
    warmup = meta.pop('warmup', 0)
    return TrajectorySet(SYSTEM_NAMES[system_id], kind, SPLIT_NAMES[split_code], inputs, outputs,
                         lengths, normalization, warmup, digest, meta)


def ensemble_set(samples, split, lengths, digest, meta, inputs=None):
    """Wrap sampled ensembles (M, K, *spatial) for field dumps"""
    if inputs is None:
        inputs = samples.mean(axis=1)
    return TrajectorySet('ensemble', KIND_PAIRS, split, inputs, samples, lengths,
                         config_digest=digest, meta=meta)


# ============= GENERATION =============

@dataclass
class SystemSettings:
    """Solver and sampling settings for one system"""
    system: str
    n: int
    noise_sigma: float = 1.0
    ic_decay: float = 2.0
    ic_amplitude: float = 1.0
    train_horizon: int = 50
    eval_horizon: int = 100
    warmup: int = 100
    source_mix: float = darcy.SOURCE_MIX
    cg_tolerance: float = 1e-6
    cg_max_iterations: int = 5000
    substep: float = None

    def __post_init__(self):
        if self.system not in SYSTEM_IDS or self.system == 'ensemble':
            raise ConfigurationError(f'Unknown system: {self.system}')

    def describe(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def system_lengths(system, n):
    if system == 'sburgers':
        return (2.0 * np.pi,)
    if system == 'ks':
        return (spectral.KS_LENGTH,)
    if system == 'kolmogorov':
        return (2.0 * np.pi, 2.0 * np.pi)
    return (1.0, 1.0)


def generation_digest(settings, n_train, n_eval_inputs, realizations_per_input, seed):
    return digest_payload({'settings': settings.describe(), 'n_train': n_train, 'n_eval_inputs': n_eval_inputs,
                           'realizations': realizations_per_input, 'seed': seed, 'format': FORMAT_VERSION})


def build_stepper(settings):
    """Solver object for a periodic system"""
    if settings.system == 'sburgers':
        grid = spectral.PeriodicGrid(1, settings.n)
        noise = spectral.SdeNoiseSpec(sigma=settings.noise_sigma)
        return spectral.BurgersSde(grid, noise, h=settings.substep or spectral.BURGERS_SUBSTEP)
    if settings.system == 'ks':
        grid = spectral.PeriodicGrid(1, settings.n, spectral.KS_LENGTH)
        return spectral.KuramotoSivashinsky(grid, h=settings.substep or spectral.KS_SUBSTEP)
    if settings.system == 'kolmogorov':
        grid = spectral.PeriodicGrid(2, settings.n)
        return spectral.KolmogorovFlow(grid, h=settings.substep or spectral.KOLMOGOROV_SUBSTEP)
    raise ConfigurationError(f'{settings.system} has no spectral stepper')


def _burgers_splits(settings, n_train, n_eval_inputs, realizations, seed, verbose):
    stepper = build_stepper(settings)
    grid = stepper.grid
    ic = lambda count, offset: spectral.initial_conditions(grid, count, seed, settings.ic_decay,
                                                           settings.ic_amplitude, offset)
    a_train = ic(n_train, 0)
    if verbose:
        print(f"🚀 Integrating {n_train} Burgers training pairs ({stepper.substeps} substeps each)")
    streams = [rng_streams.stream(seed, rng_streams.NOISE, i, 0) for i in range(n_train)]
    u_train = stepper.advance_noisy(a_train, streams)[:, None]

    a_eval = ic(n_eval_inputs, n_train)
    repeated = np.repeat(a_eval, realizations, axis=0)
    streams = [rng_streams.stream(seed, rng_streams.NOISE, n_train + j, r)
               for j in range(n_eval_inputs) for r in range(realizations)]
    if verbose:
        print(f"🚀 Integrating {n_eval_inputs} x {realizations} Burgers evaluation realizations")
    u_eval = stepper.advance_noisy(repeated, streams).reshape((n_eval_inputs, realizations, grid.n))
    meta = {'noise': stepper.noise.describe(), 'viscosity': stepper.viscosity, 'mean_handling': 'zero-mean',
            'substep': stepper.table.h, 'substeps': stepper.substeps}
    return {'train': (a_train, u_train), 'eval': (a_eval, u_eval)}, meta


def _darcy_splits(settings, n_train, n_eval_inputs, realizations, seed, verbose):
    n = settings.n
    cfg = darcy.CgConfig(settings.cg_tolerance, settings.cg_max_iterations)
    if verbose:
        print(f"🚀 Solving {n_train} Darcy training problems on a {n}x{n} grid")
    a_train = np.stack([darcy.sample_permeability(n, seed, index=(i,)) for i in range(n_train)])
    u_train = np.stack([darcy.solve_darcy(a_train[i], darcy.sample_source(n, settings.source_mix, seed=seed,
                                                                           index=(i, 0)), cfg).u
                        for i in range(n_train)])[:, None]

    a_eval = np.stack([darcy.sample_permeability(n, seed, index=(n_train + j,)) for j in range(n_eval_inputs)])
    u_eval = np.stack([darcy.solve_darcy(a_eval[j], darcy.sample_source(n, settings.source_mix, seed=seed,
                                                                         index=(n_train + j, 1),
                                                                         count=realizations), cfg).u
                       for j in range(n_eval_inputs)])
    meta = {'source_specs': [s.describe() for s in darcy.DEFAULT_SOURCE_SPECS],
            'source_mix': settings.source_mix, 'threshold': 'positive->12',
            'permeability_decay': '(1+k1^2+k2^2)^-2', 'cg': {'tolerance': cfg.tolerance,
                                                             'max_iterations': cfg.max_iterations}}
    return {'train': (a_train, u_train), 'eval': (a_eval, u_eval)}, meta


def _trajectory_splits(settings, n_train, n_eval_inputs, seed, verbose):
    stepper = build_stepper(settings)
    grid = stepper.grid
    if verbose:
        print(f"🚀 Integrating {n_train} {settings.system} training trajectories "
              f"(warmup {settings.warmup}, horizon {settings.train_horizon})")
    u0 = spectral.initial_conditions(grid, n_train, seed, settings.ic_decay, settings.ic_amplitude)
    train = stepper.trajectory(u0, settings.warmup, settings.train_horizon)

    u0 = spectral.initial_conditions(grid, n_eval_inputs, seed, settings.ic_decay, settings.ic_amplitude, n_train)
    held_out = stepper.trajectory(u0, settings.warmup, settings.eval_horizon)
    order = rng_streams.stream(seed, 'split').permutation(n_eval_inputs)
    half = n_eval_inputs // 2
    meta = {'substep': stepper.table.h, 'substeps': stepper.substeps, 'order': stepper.table.order}
    if settings.system == 'kolmogorov':
        meta.update(stepper.describe())
    return {'train': train, 'val': held_out[order[:half]], 'test': held_out[order[half:]]}, meta


def generate_pairs(system, n_train, n_eval_inputs, realizations_per_input, seed, settings=None, verbose=False):
    """
    Generate every split of a benchmark dataset

    Stochastic systems (sburgers, darcy) give 'train' (one realization per
    input) and 'eval' (realizations_per_input independent outputs per input).
    Deterministic systems (ks, kolmogorov) give 'train', 'val' and 'test'
    trajectory splits, the held-out trajectories shuffled and split evenly.

    Returns:
        dict: split name -> TrajectorySet
    """
    settings = settings or SystemSettings(system, 64 if system in ('sburgers', 'ks') else 32)
    if settings.system != system:
        raise ConfigurationError(f'Settings are for {settings.system}, not {system}')
    if n_train < 1 or n_eval_inputs < 1 or realizations_per_input < 1:
        raise ConfigurationError('Dataset counts must be positive')
    if system not in STOCHASTIC_SYSTEMS and n_eval_inputs < 2:
        raise ConfigurationError(f'{system} needs at least 2 held-out trajectories to fill both val and test, '
                                 f'got {n_eval_inputs}')

    digest = generation_digest(settings, n_train, n_eval_inputs, realizations_per_input, seed)
    lengths = system_lengths(system, settings.n)
    base_meta = {'settings': settings.describe(), 'seed': seed}

    if system in STOCHASTIC_SYSTEMS:
        builder = _burgers_splits if system == 'sburgers' else _darcy_splits
        raw, meta = builder(settings, n_train, n_eval_inputs, realizations_per_input, seed, verbose)
        normalization = Normalization.fit(*raw['train'])
        return {split: TrajectorySet(system, KIND_PAIRS, split, a, u, lengths, normalization, 0, digest,
                                     dict(base_meta, **meta))
                for split, (a, u) in raw.items()}

    raw, meta = _trajectory_splits(settings, n_train, n_eval_inputs, seed, verbose)
    train = raw['train']
    normalization = Normalization.fit(train, train)
    return {split: TrajectorySet(system, KIND_TRAJECTORIES, split, outputs[:, 0].copy(), outputs, lengths,
                                 normalization, settings.warmup, digest, dict(base_meta, **meta))
            for split, outputs in raw.items()}
