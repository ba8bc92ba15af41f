"""
Dense-array differentiation engine
Tensor values over numpy arrays with reverse-mode gradients for a closed set
of operations: affine maps, GELU, spectral mode mixing (the FNO layer),
reductions (sum / mean pooling / squares), broadcasting arithmetic, reshape
and concatenation. Also hosts the FFT wrappers and the Module container the
networks are built from.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from utils.errors import ConfigurationError, UsageError

SQRT_2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ============= TENSOR =============

class Tensor:
    """Array value that remembers how it was computed"""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward', '_op')

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, _op=None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f' {self.name}' if self.name else ''
        return f'<Tensor{label} shape={self.shape} op={self._op or "leaf"}>'

    # Arithmetic sugar routes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError('Division by a Tensor is not part of the recorded operation set')
        return mul(self, 1.0 / other)


def as_tensor(value):
    """Wrap arrays and scalars as constant tensors"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data, name=None):
    """Create a trainable leaf tensor"""
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _record(data, parents, backward, op):
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand's shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============= RECORDED OPERATIONS =============

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, 'add')


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, 'sub')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward, 'mul')


def square(x):
    x = as_tensor(x)

    def backward(g):
        return (2.0 * x.data * g,)

    return _record(x.data * x.data, (x,), backward, 'square')


def linear(x, weight, bias=None):
    """Affine map over the last axis: x @ W + b"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise UsageError(f'linear: input width {x.shape[-1]} does not match weight {weight.shape}')
    out = x.data @ weight.data
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        flat_x = x.data.reshape(-1, x.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        grads = [g @ weight.data.T, flat_x.T @ flat_g]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    return _record(out, parents, backward, 'linear')


def gelu(x):
    """Exact (erf) GELU"""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / SQRT_2))

    def backward(g):
        pdf = INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record(x.data * cdf, (x,), backward, 'gelu')


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward, 'sum')


def mean(x, axis=None, keepdims=False):
    """Mean reduction; mean over spatial axes is the global average pooling"""
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(out, (x,), backward, 'mean')


def reshape(x, shape):
    x = as_tensor(x)
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return _record(x.data.reshape(shape), (x,), backward, 'reshape')


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, 'concat')


def mode_indices(spatial_shape, modes):
    """
    Index arrays selecting the retained Fourier modes of a real spectrum

    1D keeps k in [0, m); 2D keeps kx in [0, m) and [N-m, N) with ky in [0, m)
    on the half axis produced by rfftn.
    """
    if len(spatial_shape) == 1:
        (n,), (m,) = spatial_shape, modes
        if m > n // 2:
            raise ConfigurationError(f'{m} retained modes exceed half of grid size {n}')
        return (np.arange(m),)
    if len(spatial_shape) == 2:
        (n1, n2), (m1, m2) = spatial_shape, modes
        if 2 * m1 > n1 or m2 > n2 // 2:
            raise ConfigurationError(f'modes {modes} do not fit grid {spatial_shape}')
        rows = np.concatenate([np.arange(m1), np.arange(n1 - m1, n1)])
        cols = np.arange(m2)
        return (rows[:, None], cols[None, :])
    raise ConfigurationError(f'Spectral layers support 1D and 2D grids, got {spatial_shape}')


def mode_block_shape(modes):
    """Shape of the complex weight block for the retained modes"""
    if len(modes) == 1:
        return (modes[0],)
    return (2 * modes[0], modes[1])


def spectral_conv(x, weight_re, weight_im, modes):
    """
    FNO spectral convolution on channels-last input

    Args:
        x (Tensor): (B, *spatial, C_in)
        weight_re, weight_im (Tensor): (*mode_block, C_in, C_out) real and imaginary parts
        modes (tuple): retained modes per spatial axis

    Returns:
        Tensor: (B, *spatial, C_out)
    """
    x, weight_re, weight_im = as_tensor(x), as_tensor(weight_re), as_tensor(weight_im)
    spatial = x.shape[1:-1]
    axes = tuple(range(1, 1 + len(spatial)))
    idx = mode_indices(spatial, modes)
    gather = (slice(None),) + idx + (slice(None),)

    spectrum = np.fft.rfftn(x.data, axes=axes)
    retained = spectrum[gather]
    weights = weight_re.data + 1j * weight_im.data
    mixed = np.einsum('b...i,...io->b...o', retained, weights)
    out_shape = (x.shape[0],) + spectrum.shape[1:-1] + (weights.shape[-1],)
    out_ft = np.zeros(out_shape, dtype=mixed.dtype)
    out_ft[gather] = mixed
    out = np.fft.irfftn(out_ft, s=spatial, axes=axes).astype(x.dtype, copy=False)

    def backward(g):
        total = float(np.prod(spatial))
        # adjoint of irfftn: interior half-axis modes count twice
        half = spectrum.shape[-2]
        factor = np.full(half, 2.0)
        factor[0] = 1.0
        if spatial[-1] % 2 == 0:
            factor[-1] = 1.0
        g_spec = np.fft.rfftn(g, axes=axes) / total
        g_mixed = g_spec[gather] * factor[idx[-1]][..., None]
        g_weights = np.einsum('b...o,b...i->...io', g_mixed, retained.conj())
        g_retained = np.einsum('b...o,...io->b...i', g_mixed, weights.conj())
        full = np.zeros(x.shape, dtype=g_retained.dtype)
        full[gather] = g_retained
        g_x = np.fft.ifftn(full, axes=axes).real * total
        return (g_x.astype(x.dtype, copy=False),
                g_weights.real.astype(weight_re.dtype, copy=False),
                g_weights.imag.astype(weight_im.dtype, copy=False))

    return _record(out, (x, weight_re, weight_im), backward, 'spectral_conv')


# ============= REVERSE PASS =============

def backward(loss):
    """
    Reverse-mode sweep from a scalar loss

    Returns:
        dict: {parameter Tensor: gradient array} for every tracked leaf; the
        gradients are also stored on each leaf's .grad
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError('backward expects a scalar Tensor loss')
    if not loss.requires_grad or loss._backward is None:
        raise UsageError('backward through an unrecorded value: loss does not depend on any tracked parameter')

    order, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            node.grad = g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
    return leaves


# ============= FFT =============

@dataclass
class ComplexSpectrum:
    """Complex spectrum of a field; interleaved (re, im) view in .data"""
    values: np.ndarray
    dims: tuple

    @property
    def shape(self):
        return tuple(self.values.shape[d] for d in self.dims)

    @property
    def data(self):
        return np.stack([self.values.real, self.values.imag], axis=-1)


def is_power_of_two(n):
    n = int(n)
    return n > 0 and (n & (n - 1)) == 0


def require_power_of_two(n, what='axis'):
    if not is_power_of_two(n):
        raise ConfigurationError(f'{what} length {n} is not a power of two')


def fft_forward(field, dims):
    """
    Unnormalized forward FFT over the listed axes

    Convention: forward carries no scale factor, fft_inverse applies 1/N.
    """
    values = field.data if isinstance(field, Tensor) else np.asarray(field)
    dims = tuple(d % values.ndim for d in np.atleast_1d(dims))
    for d in dims:
        require_power_of_two(values.shape[d], f'FFT axis {d}')
    return ComplexSpectrum(np.fft.fftn(values, axes=dims), dims)


def fft_inverse(spectrum, real=True):
    """Inverse FFT with 1/N scaling; real=True drops the imaginary residue"""
    values = np.fft.ifftn(spectrum.values, axes=spectrum.dims)
    return values.real if real else values


def hermitian_residue(spectrum):
    """Max relative violation of X[-k] = conj(X[k]) over the transformed axes"""
    flipped = spectrum.values
    for d in spectrum.dims:
        flipped = np.roll(np.flip(flipped, axis=d), 1, axis=d)
    scale = max(np.abs(spectrum.values).max(), 1e-300)
    return float(np.abs(flipped - spectrum.values.conj()).max() / scale)


# ============= MODULES =============

class Module:
    """Container that discovers parameters and sub-modules from its attributes"""

    def named_parameters(self, prefix=''):
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{prefix}{key}.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f'{prefix}{key}.{i}.')

    def parameters(self):
        return dict(self.named_parameters())

    def num_parameters(self):
        return int(np.sum([p.size for p in self.parameters().values()]))

    def state(self):
        """Copy of all parameter arrays keyed by name"""
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, arrays, strict=True):
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(arrays))
            if missing:
                raise UsageError(f'Missing parameters: {", ".join(missing[:5])}')
        for name, p in params.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise UsageError(f'Parameter {name}: shape {value.shape} does not match {p.shape}')
            p.data = value.astype(p.dtype, copy=True)

    def trainable(self):
        return {name: p for name, p in self.named_parameters() if p.requires_grad}

    def freeze(self):
        for p in self.parameters().values():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters().values():
            p.requires_grad = True
        return self

    def astype(self, dtype):
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Dense affine layer with uniform fan-in initialization"""

    def __init__(self, in_features, out_features, rng, bias=True):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = parameter(rng.uniform(-bound, bound, size=out_features)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class SpectralConv(Module):
    """Complex mode mixing over the retained Fourier modes (no bias)"""

    def __init__(self, in_channels, out_channels, modes, rng):
        self.modes = tuple(int(m) for m in modes)
        scale = 1.0 / (in_channels * out_channels)
        shape = mode_block_shape(self.modes) + (in_channels, out_channels)
        self.weight_re = parameter(scale * rng.uniform(size=shape))
        self.weight_im = parameter(scale * rng.uniform(size=shape))

    def forward(self, x):
        return spectral_conv(x, self.weight_re, self.weight_im, self.modes)


class Mlp(Module):
    """Stack of Linear layers with GELU between them"""

    def __init__(self, sizes, rng):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x
