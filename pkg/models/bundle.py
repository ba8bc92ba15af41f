"""
Model bundles and the DLLM checkpoint format
A bundle holds the raw parameters of the networks of one training stage, their
EMA shadows, the AdamW moments, the architecture and the digests of the
dataset and upstream checkpoints it was trained from.

File layout (little-endian):
    magic 'DLLM', u32 version, u64 architecture digest, u64 content digest,
    u32 meta length, meta JSON, u32 blob count, then per blob
    u16 name length, name, u8 dtype code, u8 ndim, u32 x ndim shape, data.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from models.baseline import DeterministicFno
from models.dll_head import DiffusionLastLayer
from models.operator_encoder import OperatorEncoder
from utils.digest import canonical_json, digest_bytes, digest_payload, format_digest
from utils.errors import ArtifactFormatError, DigestMismatchError, PrerequisiteError

MAGIC = b'DLLM'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIQQI')

KIND_ENCODER = 'encoder'
KIND_DLL = 'dll'
KIND_FNO = 'fno'

# top-level attribute -> blob prefix
PREFIXES = {
    'basis_net': 'no',
    'encoder_net': 'nf',
    'encoder_head': 'nf',
    'condition_net': 'cond',
    'condition_head': 'cond',
    'velocity_net': 'vel',
    'net': 'fno',
}

DTYPE_CODES = {np.dtype('<f8'): 0, np.dtype('<f4'): 1}
DTYPE_FROM_CODE = {v: k for k, v in DTYPE_CODES.items()}


def blob_name(param_name):
    top = param_name.split('.')[0]
    return f'{PREFIXES[top]}.{param_name}'


def param_name(name):
    return name.split('.', 1)[1]


# ============= ARCHITECTURES =============

def encoder_architecture(model):
    net = model.basis_net
    return {'dim': model.dim, 'latent_dim': model.latent_dim, 'width': net.width, 'modes': net.modes[0],
            'layers': len(net.spectral)}


def dll_architecture(head, encoder):
    net = head.condition_net
    return {'width': net.width, 'modes': net.modes[0], 'layers': len(net.spectral),
            'hidden': head.velocity_net.layers[0].weight.shape[1],
            'condition_dim': head.condition_head.weight.shape[1], 'encoder': encoder_architecture(encoder)}


def fno_architecture(model):
    net = model.net
    return {'dim': net.dim, 'width': net.width, 'modes': net.modes[0], 'layers': len(net.spectral)}


def _build_encoder(arch):
    return OperatorEncoder(arch['dim'], arch['latent_dim'], arch['width'], arch['modes'], n_layers=arch['layers'])


# ============= BUNDLE =============

@dataclass
class ModelBundle:
    kind: str
    architecture: dict
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def architecture_digest(self):
        return digest_payload({'kind': self.kind, 'architecture': self.architecture})

    @property
    def digest(self):
        """Content digest over meta and every blob"""
        blobs = {name: format_digest(digest_bytes(np.ascontiguousarray(value).tobytes()))
                 for name, value in self.arrays.items()}
        return digest_payload({'kind': self.kind, 'architecture': self.architecture, 'meta': self.meta,
                               'blobs': blobs})

    @property
    def dataset_digest(self):
        return self.meta.get('dataset_digest')

    def add_module(self, module, result=None):
        """Store raw weights (EMA shadows and AdamW moments when a TrainingResult is given)"""
        raw = result.raw if result is not None and result.raw is not None else module.state()
        for name, value in raw.items():
            self.arrays[blob_name(name)] = value
        if result is None:
            return self
        for name, value in result.ema.shadow.items():
            self.arrays['ema.' + blob_name(name)] = value
        for name in result.optimizer.m:
            self.arrays['opt.m.' + blob_name(name)] = result.optimizer.m[name]
            self.arrays['opt.v.' + blob_name(name)] = result.optimizer.v[name]
        self.meta['optimizer_step'] = result.optimizer.step
        return self

    def weights_for(self, module, use_ema=True):
        """Inference weights of a module: EMA shadow when stored, raw otherwise"""
        weights = {}
        for name, _ in module.named_parameters():
            key = blob_name(name)
            if use_ema and 'ema.' + key in self.arrays:
                weights[name] = self.arrays['ema.' + key]
            elif key in self.arrays:
                weights[name] = self.arrays[key]
        return weights

    def _expect(self, kind):
        if self.kind != kind:
            raise PrerequisiteError(f'Expected a {kind} checkpoint, got {self.kind}')

    def build_encoder(self, use_ema=True):
        """Frozen operator encoder from an encoder or dll bundle"""
        arch = self.architecture if self.kind == KIND_ENCODER else self.architecture.get('encoder')
        if arch is None:
            raise PrerequisiteError(f'A {self.kind} checkpoint holds no operator encoder')
        model = _build_encoder(arch)
        model.load_state(self.weights_for(model, use_ema))
        return model.freeze()

    def build_dll(self, use_ema=True):
        self._expect(KIND_DLL)
        arch = self.architecture
        head = DiffusionLastLayer(arch['encoder']['dim'], arch['encoder']['latent_dim'], arch['width'],
                                  arch['modes'], arch['hidden'], arch['condition_dim'], n_layers=arch['layers'])
        head.load_state(self.weights_for(head, use_ema))
        return head.freeze()

    def build_fno(self, use_ema=True):
        self._expect(KIND_FNO)
        arch = self.architecture
        model = DeterministicFno(arch['dim'], arch['width'], arch['modes'], n_layers=arch['layers'])
        model.load_state(self.weights_for(model, use_ema))
        return model.freeze()

    def summary(self):
        counts = {}
        for name, value in self.arrays.items():
            if name.startswith(('ema.', 'opt.')):
                continue
            prefix = name.split('.')[0]
            counts[prefix] = counts.get(prefix, 0) + int(np.asarray(value).size)
        return {'kind': self.kind, 'parameters': counts, 'digest': format_digest(self.digest),
                'dataset_digest': format_digest(self.dataset_digest or 0)}


def encoder_bundle(model, result, meta):
    return ModelBundle(KIND_ENCODER, encoder_architecture(model), meta=dict(meta)).add_module(model, result)


def dll_bundle(head, result, encoder, encoder_digest, meta):
    """The DLL head with the frozen encoder weights it was trained against"""
    bundle = ModelBundle(KIND_DLL, dll_architecture(head, encoder), meta=dict(meta, upstream_digest=encoder_digest))
    bundle.add_module(encoder)
    return bundle.add_module(head, result)


def fno_bundle(model, result, meta):
    return ModelBundle(KIND_FNO, fno_architecture(model), meta=dict(meta)).add_module(model, result)


# ============= FILE FORMAT =============

def write_bundle(path, bundle):
    """Write a bundle; returns its content digest"""
    digest = bundle.digest
    meta_bytes = canonical_json({'kind': bundle.kind, 'architecture': bundle.architecture,
                                 'meta': bundle.meta}).encode('utf-8')
    with open(path, 'wb') as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, bundle.architecture_digest, digest, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack('<I', len(bundle.arrays)))
        for name in sorted(bundle.arrays):
            value = np.asarray(bundle.arrays[name])
            dtype = value.dtype.newbyteorder('<')
            if dtype not in DTYPE_CODES:
                value, dtype = value.astype('<f8'), np.dtype('<f8')
            encoded = name.encode('utf-8')
            fh.write(struct.pack('<H', len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack('<BB', DTYPE_CODES[dtype], value.ndim))
            fh.write(np.asarray(value.shape, dtype='<u4').tobytes())
            fh.write(np.ascontiguousarray(value, dtype=dtype).tobytes())
    return digest


def _take(buffer, offset, count, path):
    if offset + count > len(buffer):
        raise ArtifactFormatError(f'{path}: checkpoint is truncated')
    return buffer[offset:offset + count], offset + count


def read_bundle(path, expected_kind=None):
    """Read a DLLM checkpoint and verify its digests"""
    try:
        with open(path, 'rb') as fh:
            buffer = fh.read()
    except FileNotFoundError as e:
        raise PrerequisiteError(f'Checkpoint not found: {path}') from e

    raw, offset = _take(buffer, 0, _HEADER.size, path)
    magic, version, arch_digest, content_digest, meta_len = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ArtifactFormatError(f'{path}: not a DLLM checkpoint (magic {magic!r})')
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f'{path}: unsupported checkpoint version {version}')
    raw, offset = _take(buffer, offset, meta_len, path)
    try:
        header = json.loads(raw.decode('utf-8'))
    except ValueError as e:
        raise ArtifactFormatError(f'{path}: unreadable checkpoint metadata') from e

    raw, offset = _take(buffer, offset, 4, path)
    (count,) = struct.unpack('<I', raw)
    arrays = {}
    for _ in range(count):
        raw, offset = _take(buffer, offset, 2, path)
        (name_len,) = struct.unpack('<H', raw)
        raw, offset = _take(buffer, offset, name_len, path)
        name = raw.decode('utf-8')
        raw, offset = _take(buffer, offset, 2, path)
        dtype_code, ndim = struct.unpack('<BB', raw)
        if dtype_code not in DTYPE_FROM_CODE:
            raise ArtifactFormatError(f'{path}: blob {name} has unknown dtype code {dtype_code}')
        raw, offset = _take(buffer, offset, 4 * ndim, path)
        shape = tuple(int(s) for s in np.frombuffer(raw, dtype='<u4'))
        dtype = DTYPE_FROM_CODE[dtype_code]
        raw, offset = _take(buffer, offset, int(np.prod(shape)) * dtype.itemsize, path)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
    if offset != len(buffer):
        raise ArtifactFormatError(f'{path}: {len(buffer) - offset} trailing bytes')

    bundle = ModelBundle(header['kind'], header['architecture'], arrays, header['meta'])
    if bundle.architecture_digest != arch_digest:
        raise DigestMismatchError(f'{path}: architecture digest {format_digest(arch_digest)} does not match '
                                  f'its architecture record')
    if bundle.digest != content_digest:
        raise DigestMismatchError(f'{path}: content digest {format_digest(content_digest)} does not match '
                                  f'the stored parameters')
    if expected_kind is not None:
        bundle._expect(expected_kind)
    return bundle


def check_dataset(bundle, dataset_digest, path=''):
    """Hard error when a checkpoint was trained on a different dataset"""
    if bundle.dataset_digest != dataset_digest:
        raise DigestMismatchError(f'{path or bundle.kind}: trained on dataset {format_digest(bundle.dataset_digest or 0)}, '
                                  f'not {format_digest(dataset_digest)}')
