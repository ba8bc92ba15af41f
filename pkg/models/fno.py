"""
Fourier neural operator backbone
Lift to the hidden width (grid coordinates appended), four spectral layers
with pointwise skip maps, and a channel MLP projection of width 2 x hidden.
"""
import numpy as np

from utils import diff_engine as de
from utils.errors import ConfigurationError


def desk_modes(n, cap=32):
    """Retained modes min(cap, n // 3)"""
    return max(1, min(cap, n // 3))


def grid_coordinates(spatial_shape):
    """Normalized coordinates in [0, 1), channels-last (*spatial, dim)"""
    axes = [np.arange(n) / n for n in spatial_shape]
    return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)


def with_channel(x):
    """(B, *spatial) arrays gain a trailing channel axis; Tensors pass through"""
    if isinstance(x, de.Tensor):
        return x
    return de.Tensor(np.asarray(x)[..., None])


class FnoBackbone(de.Module):
    """
    FNO with channels-last activations (B, *spatial, C)

    Args:
        in_channels (int): input field channels (coordinates are added on top)
        out_channels (int): channels produced by the projection MLP
        width (int): hidden width
        modes (int): retained modes per axis
        dim (int): 1 or 2 spatial dimensions
        rng (Generator): initialization stream
        n_layers (int): spectral layers
    """

    def __init__(self, in_channels, out_channels, width, modes, dim, rng, n_layers=4):
        if dim not in (1, 2):
            raise ConfigurationError(f'FNO supports 1D and 2D grids, got dim={dim}')
        self.dim = dim
        self.modes = (int(modes),) * dim
        self.width = width
        self.lift = de.Linear(in_channels + dim, width, rng)
        self.spectral = [de.SpectralConv(width, width, self.modes, rng) for _ in range(n_layers)]
        self.pointwise = [de.Linear(width, width, rng) for _ in range(n_layers)]
        self.project = de.Mlp([width, 2 * width, out_channels], rng)

    def features(self, x):
        """Hidden feature map after the last spectral layer"""
        x = with_channel(x)
        spatial = x.shape[1:-1]
        coords = np.broadcast_to(grid_coordinates(spatial), (x.shape[0],) + spatial + (self.dim,))
        h = self.lift(de.concat([x, de.Tensor(coords.astype(x.dtype))], axis=-1))
        last = len(self.spectral) - 1
        for i, (spectral, pointwise) in enumerate(zip(self.spectral, self.pointwise)):
            h = spectral(h) + pointwise(h)
            if i < last:
                h = de.gelu(h)
        return h

    def forward(self, x):
        return self.project(self.features(x))

    def pooled(self, x):
        """Global average pooling of the projected output over the grid"""
        out = self.forward(x)
        return de.mean(out, axis=tuple(range(1, 1 + self.dim)))

    def describe(self):
        return {'width': self.width, 'modes': list(self.modes), 'dim': self.dim,
                'layers': len(self.spectral), 'parameters': self.num_parameters()}
