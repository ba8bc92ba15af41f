"""
Pseudo-spectral exponential integrators
Periodic grids, ETDRK2/ETDRK4 coefficient tables and the steppers behind the
stochastic Burgers, Kuramoto-Sivashinsky and Kolmogorov-flow datasets.
States are advanced in the real-FFT domain; fields handed in and out are real.
"""
from dataclasses import dataclass, field

import numpy as np

from utils import rng as rng_streams
from utils.diff_engine import require_power_of_two
from utils.errors import ConfigurationError, NumericsError

# Burgers constants
BURGERS_VISCOSITY = 0.1
BURGERS_SUBSTEP = 1e-4
BURGERS_MACRO_STEP = 1.0

# Kuramoto-Sivashinsky constants
KS_LENGTH = 60.0
KS_SUBSTEP = 0.01
KS_SUBSTEPS = 100

# Kolmogorov flow constants
KOLMOGOROV_VISCOSITY = 1e-2
KOLMOGOROV_DRAG = 0.1
KOLMOGOROV_FORCING_WAVENUMBER = 4
KOLMOGOROV_FORCING_AMPLITUDE = 1.0
KOLMOGOROV_SUBSTEP = 0.01
KOLMOGOROV_SUBSTEPS = 25

CONTOUR_POINTS = 32
NOISE_BLOCK = 1000


# ============= GRID =============

@dataclass
class PeriodicGrid:
    """Uniform periodic grid; axis 0 is x, the last axis is the real-FFT half axis"""
    dim: int
    n: int
    length: float = 2.0 * np.pi

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError(f'Periodic grids are 1D or 2D, got dim={self.dim}')
        require_power_of_two(self.n, 'grid')
        if self.length <= 0:
            raise ConfigurationError(f'Domain length must be positive, got {self.length}')

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def spacing(self):
        return self.length / self.n

    @property
    def cell_volume(self):
        return self.spacing ** self.dim

    @property
    def scale(self):
        return 2.0 * np.pi / self.length

    def coordinates(self):
        """Node coordinates; 2D returns (X, Y) with ij indexing"""
        x = np.arange(self.n) * self.spacing
        if self.dim == 1:
            return x
        return np.meshgrid(x, x, indexing='ij')

    def integer_modes(self):
        """Integer mode numbers per axis in rfftn layout"""
        full = np.fft.fftfreq(self.n, d=1.0 / self.n)
        half = np.fft.rfftfreq(self.n, d=1.0 / self.n)
        if self.dim == 1:
            return (half,)
        return np.meshgrid(full, half, indexing='ij')

    @property
    def wavenumbers(self):
        """Scaled wavenumbers per axis (rfftn layout)"""
        return tuple(self.scale * m for m in self.integer_modes())

    def derivative_wavenumbers(self):
        """Wavenumbers for odd derivatives with the Nyquist mode zeroed"""
        result = []
        for m in self.integer_modes():
            k = self.scale * m
            result.append(np.where(np.abs(m) == self.n // 2, 0.0, k))
        return tuple(result)

    def wavenumber_squared(self):
        return np.sum([k ** 2 for k in self.wavenumbers], axis=0)

    def dealias_mask(self):
        """2/3 rule: keep modes with |j| <= n/3 along every axis"""
        cutoff = self.n / 3.0
        mask = np.ones(self.integer_modes()[0].shape, dtype=bool)
        for m in self.integer_modes():
            mask &= np.abs(m) <= cutoff
        return mask

    @property
    def axes(self):
        return tuple(range(-self.dim, 0))

    def to_spectral(self, u):
        return np.fft.rfftn(u, axes=self.axes)

    def to_physical(self, v):
        return np.fft.irfftn(v, s=self.shape, axes=self.axes)

    def describe(self):
        return {'dim': self.dim, 'n': self.n, 'length': float(self.length)}


# ============= ETDRK TABLES =============

@dataclass
class EtdrkTable:
    """Per-mode exponential integrator coefficients"""
    order: int
    h: float
    linear_symbol: np.ndarray
    E: np.ndarray
    E2: np.ndarray
    coefficients: dict = field(default_factory=dict)
    grid: PeriodicGrid = None


def build_etdrk_table(linear_symbol, h, order=4, grid=None, contour_points=CONTOUR_POINTS):
    """
    Precompute ETDRK coefficients for a diagonal linear operator

    The phi-functions are evaluated as means over contour_points points on the
    unit circle around each L*h, which stays accurate when |L*h| is tiny.

    Args:
        linear_symbol (ndarray): per-mode linear operator values
        h (float): substep length
        order (int): 2 (Cox-Matthews) or 4 (Kassam-Trefethen)
        grid (PeriodicGrid): optional grid the table belongs to

    Returns:
        EtdrkTable
    """
    if not h > 0:
        raise ConfigurationError(f'ETDRK substep must be positive, got {h}')
    if order not in (2, 4):
        raise ConfigurationError(f'ETDRK order must be 2 or 4, got {order}')

    L = np.asarray(linear_symbol)
    real_symbol = not np.iscomplexobj(L)
    roots = np.exp(1j * np.pi * (np.arange(1, contour_points + 1) - 0.5) / contour_points * 2.0)
    LR = h * L[..., None].astype(complex) + roots

    def contour_mean(values):
        out = h * np.mean(values, axis=-1)
        return out.real if real_symbol else out

    exp_LR = np.exp(LR)
    if order == 2:
        coefficients = {
            'phi1': contour_mean((exp_LR - 1.0) / LR),
            'phi2': contour_mean((exp_LR - 1.0 - LR) / LR ** 2),
        }
    else:
        coefficients = {
            'Q': contour_mean((np.exp(LR / 2.0) - 1.0) / LR),
            'f1': contour_mean((-4.0 - LR + exp_LR * (4.0 - 3.0 * LR + LR ** 2)) / LR ** 3),
            'f2': contour_mean((2.0 + LR + exp_LR * (-2.0 + LR)) / LR ** 3),
            'f3': contour_mean((-4.0 - 3.0 * LR - LR ** 2 + exp_LR * (4.0 - LR)) / LR ** 3),
        }
    return EtdrkTable(order=order, h=float(h), linear_symbol=L,
                      E=np.exp(h * L), E2=np.exp(h * L / 2.0),
                      coefficients=coefficients, grid=grid)


def etdrk_step(table, v, nonlinear, t=0.0):
    """
    Advance a spectral state by one substep

    Args:
        table (EtdrkTable): coefficients
        v (ndarray): spectral state
        nonlinear (callable): N(v, t) in spectral space
        t (float): time at the start of the substep
    """
    h, c = table.h, table.coefficients
    Nv = nonlinear(v, t)
    if table.order == 2:
        a = table.E * v + c['phi1'] * Nv
        Na = nonlinear(a, t + h)
        return a + c['phi2'] * (Na - Nv)

    a = table.E2 * v + c['Q'] * Nv
    Na = nonlinear(a, t + h / 2.0)
    b = table.E2 * v + c['Q'] * Na
    Nb = nonlinear(b, t + h / 2.0)
    cc = table.E2 * a + c['Q'] * (2.0 * Nb - Nv)
    Nc = nonlinear(cc, t + h)
    return table.E * v + Nv * c['f1'] + 2.0 * (Na + Nb) * c['f2'] + Nc * c['f3']


def _check_finite(v, substep, system):
    if not np.all(np.isfinite(v)):
        raise NumericsError(f'{system}: non-finite state at substep {substep}')


# ============= STEPPERS =============

class SpectralStepper:
    """Shared macro-step loop; subclasses supply the nonlinear term"""

    system = 'spectral'

    def __init__(self, grid, table, substeps):
        self.grid = grid
        self.table = table
        self.substeps = int(substeps)
        self.mask = grid.dealias_mask()
        self.ik = tuple(1j * k for k in grid.derivative_wavenumbers())
        self.substep_count = 0

    def nonlinear(self, v, t):
        raise NotImplementedError

    def substep(self, v, t=0.0):
        v = etdrk_step(self.table, v, self.nonlinear, t)
        self.substep_count += 1
        _check_finite(v, self.substep_count, self.system)
        return v

    def advance_spectral(self, v, steps=1):
        for _ in range(steps):
            for _ in range(self.substeps):
                v = self.substep(v)
        return v

    def advance(self, u, steps=1):
        """Advance a real field (or a batch) by whole macro steps"""
        return self.grid.to_physical(self.advance_spectral(self.grid.to_spectral(u), steps))

    def trajectory(self, u0, warmup, horizon):
        """
        Run warmup macro steps, then record horizon further steps

        Returns:
            ndarray: (..., horizon + 1, *spatial) with index 0 the post-warmup state
        """
        v = self.advance_spectral(self.grid.to_spectral(u0), warmup)
        frames = [self.grid.to_physical(v)]
        for _ in range(horizon):
            v = self.advance_spectral(v, 1)
            frames.append(self.grid.to_physical(v))
        return np.stack(frames, axis=-1 - self.grid.dim)


@dataclass
class SdeNoiseSpec:
    """Additive noise on cos(jx) for three modes"""
    modes: tuple = (1, 2, 3)
    weights: tuple = (1.0, 0.5, 0.1)
    sigma: float = 1.0

    def __post_init__(self):
        if len(self.modes) != 3 or len(self.weights) != 3:
            raise ConfigurationError('Burgers noise uses exactly three modes')
        if self.sigma < 0 or any(w < 0 for w in self.weights):
            raise ConfigurationError('Noise amplitudes must be nonnegative')

    @property
    def amplitudes(self):
        return self.sigma * np.asarray(self.weights, dtype=float)

    def basis(self, grid):
        """(3, n) array of sigma_j * cos(j x)"""
        x = grid.coordinates()
        return self.amplitudes[:, None] * np.cos(np.outer(self.modes, x))

    def describe(self):
        return {'modes': list(self.modes), 'weights': list(self.weights), 'sigma': float(self.sigma)}


class BurgersSde(SpectralStepper):
    """u_t = nu u_xx - (u^2/2)_x + sum_j sigma_j cos(jx) dW_j"""

    system = 'sburgers'

    def __init__(self, grid, noise=None, viscosity=BURGERS_VISCOSITY, h=BURGERS_SUBSTEP,
                 macro_step=BURGERS_MACRO_STEP):
        if grid.dim != 1:
            raise ConfigurationError('Stochastic Burgers runs on a 1D grid')
        (k,) = grid.wavenumbers
        table = build_etdrk_table(-viscosity * k ** 2, h, order=4, grid=grid)
        super().__init__(grid, table, int(round(macro_step / h)))
        self.viscosity = viscosity
        self.noise = noise or SdeNoiseSpec()
        self.noise_hat = np.fft.rfft(self.noise.basis(grid), axis=-1)

    def nonlinear(self, v, t):
        u = np.fft.irfft(v, n=self.grid.n, axis=-1)
        return -0.5 * self.ik[0] * self.mask * np.fft.rfft(u * u, axis=-1)

    def noisy_substep(self, v, dW):
        """Drift substep followed by the Euler-Maruyama increment (dW already scaled by sqrt(h))"""
        v = etdrk_step(self.table, v, self.nonlinear)
        v = v + dW @ self.noise_hat
        self.substep_count += 1
        _check_finite(v, self.substep_count, self.system)
        return v

    def advance_noisy(self, u, generators, steps=1):
        """
        Integrate a batch where row i draws its increments from generators[i]

        Args:
            u (ndarray): (B, n) initial fields
            generators (list): one numpy Generator per row
        """
        v = self.grid.to_spectral(np.atleast_2d(u))
        if len(generators) != v.shape[0]:
            raise ConfigurationError('One noise stream is required per trajectory')
        scale = np.sqrt(self.table.h)
        total = steps * self.substeps
        done = 0
        while done < total:
            block = min(NOISE_BLOCK, total - done)
            increments = scale * np.stack([g.standard_normal((block, 3)) for g in generators], axis=1)
            for i in range(block):
                v = self.noisy_substep(v, increments[i])
            done += block
        return self.grid.to_physical(v)


def burgers_sde_step(u, table, noise, dW):
    """
    One Burgers substep on a real field: ETDRK4 drift then additive noise

    Args:
        u (ndarray): (..., n) field
        table (EtdrkTable): table for L = -nu k^2 built with its grid
        noise (SdeNoiseSpec): noise modes and amplitudes
        dW (ndarray): (..., 3) Brownian increments already scaled by sqrt(h)
    """
    grid = table.grid
    mask = grid.dealias_mask()
    ik = 1j * grid.derivative_wavenumbers()[0]

    def nonlinear(v, t):
        w = np.fft.irfft(v, n=grid.n, axis=-1)
        return -0.5 * ik * mask * np.fft.rfft(w * w, axis=-1)

    v = etdrk_step(table, np.fft.rfft(u, axis=-1), nonlinear)
    v = v + np.asarray(dW) @ np.fft.rfft(noise.basis(grid), axis=-1)
    _check_finite(v, 1, 'sburgers')
    return np.fft.irfft(v, n=grid.n, axis=-1)


class KuramotoSivashinsky(SpectralStepper):
    """u_t + u u_x + u_xx + u_xxxx = 0 with ETDRK2"""

    system = 'ks'

    def __init__(self, grid, h=KS_SUBSTEP, substeps=KS_SUBSTEPS):
        if grid.dim != 1:
            raise ConfigurationError('Kuramoto-Sivashinsky runs on a 1D grid')
        (k,) = grid.wavenumbers
        table = build_etdrk_table(k ** 2 - k ** 4, h, order=2, grid=grid)
        super().__init__(grid, table, substeps)

    def nonlinear(self, v, t):
        u = np.fft.irfft(v, n=self.grid.n, axis=-1)
        return -0.5 * self.ik[0] * self.mask * np.fft.rfft(u * u, axis=-1)


def ks_step(u, table):
    """One KS macro step (100 ETDRK2 substeps by default) on a real field"""
    stepper = KuramotoSivashinsky(table.grid, h=table.h)
    stepper.table = table
    return stepper.advance(u, 1)


class KolmogorovFlow(SpectralStepper):
    """
    Vorticity form: w_t + u.grad(w) = nu lap(w) - alpha w + F,  F = A sin(k_f y)
    """

    system = 'kolmogorov'

    def __init__(self, grid, viscosity=KOLMOGOROV_VISCOSITY, drag=KOLMOGOROV_DRAG,
                 forcing_wavenumber=KOLMOGOROV_FORCING_WAVENUMBER,
                 forcing_amplitude=KOLMOGOROV_FORCING_AMPLITUDE,
                 h=KOLMOGOROV_SUBSTEP, substeps=KOLMOGOROV_SUBSTEPS):
        if grid.dim != 2:
            raise ConfigurationError('Kolmogorov flow runs on a 2D grid')
        k2 = grid.wavenumber_squared()
        table = build_etdrk_table(-viscosity * k2 - drag, h, order=2, grid=grid)
        super().__init__(grid, table, substeps)
        self.viscosity = viscosity
        self.drag = drag
        self.forcing_wavenumber = forcing_wavenumber
        self.forcing_amplitude = forcing_amplitude
        self.inverse_laplacian = np.where(k2 > 0, -1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
        _, y = grid.coordinates()
        forcing = forcing_amplitude * np.sin(forcing_wavenumber * y)
        self.forcing_hat = grid.to_spectral(forcing)

    def velocity(self, omega_hat):
        """Stream function from lap(psi) = omega, then u = (-psi_y, psi_x)"""
        psi_hat = self.inverse_laplacian * omega_hat
        ikx, iky = self.ik
        ux = self.grid.to_physical(-iky * psi_hat)
        uy = self.grid.to_physical(ikx * psi_hat)
        return ux, uy

    def nonlinear(self, v, t):
        ikx, iky = self.ik
        ux, uy = self.velocity(v)
        wx = self.grid.to_physical(ikx * v)
        wy = self.grid.to_physical(iky * v)
        advection = self.grid.to_spectral(ux * wx + uy * wy)
        return self.forcing_hat - self.mask * advection

    def describe(self):
        return {'viscosity': self.viscosity, 'drag': self.drag,
                'forcing_wavenumber': self.forcing_wavenumber,
                'forcing_amplitude': self.forcing_amplitude}


def kolmogorov_step(omega, table, forcing_wavenumber=KOLMOGOROV_FORCING_WAVENUMBER,
                    forcing_amplitude=KOLMOGOROV_FORCING_AMPLITUDE):
    """One Kolmogorov macro step (25 ETDRK2 substeps by default) on a vorticity field"""
    stepper = KolmogorovFlow(table.grid, forcing_wavenumber=forcing_wavenumber,
                             forcing_amplitude=forcing_amplitude, h=table.h)
    stepper.table = table
    return stepper.advance(omega, 1)


# ============= INITIAL CONDITIONS =============

def sample_initial_condition(grid, decay_exponent=2.0, amplitude=1.0, seed=0, mean=0.0, index=(), rng=None):
    """
    Random-phase Fourier series with |mode k| proportional to |k|^-p

    The phases come from the FFT of real white noise so the spectrum is
    Hermitian; mode 0 and the Nyquist modes are zeroed. The field is rescaled
    to max-abs = amplitude and shifted by mean.

    Args:
        grid (PeriodicGrid): target grid
        decay_exponent (float): p in |k|^-p
        amplitude (float): max-abs of the zero-mean field
        seed (int): run seed
        mean (float): constant added after rescaling
        index (tuple): stream indices (e.g. trajectory number)
        rng (Generator): explicit generator overriding (seed, index)
    """
    rng = rng or rng_streams.stream(seed, rng_streams.DATA, *index)
    white = rng.standard_normal(grid.shape)
    if amplitude == 0:
        return np.full(grid.shape, float(mean))

    phases = np.exp(1j * np.angle(grid.to_spectral(white)))
    modes = grid.integer_modes()
    radius = np.sqrt(np.sum([m ** 2 for m in modes], axis=0))
    keep = radius > 0
    for m in modes:
        keep &= np.abs(m) != grid.n // 2
    magnitude = np.where(keep, np.where(radius > 0, radius, 1.0) ** (-float(decay_exponent)), 0.0)
    field = grid.to_physical(magnitude * phases)
    peak = np.abs(field).max()
    return amplitude * field / peak + mean


def initial_conditions(grid, count, seed, decay_exponent=2.0, amplitude=1.0, offset=0):
    """Stack of independent initial conditions indexed offset .. offset + count - 1"""
    return np.stack([sample_initial_condition(grid, decay_exponent, amplitude, seed, index=(offset + i,))
                     for i in range(count)])


def spectrum_slope(fields, grid, k_min=2, k_max=32):
    """
    Log-log slope of the mean absolute 1D spectrum over [k_min, k_max]

    k_max is clamped below the grid's Nyquist mode, which the sampler zeroes.
    """
    fields = np.asarray(fields)
    if fields.shape[-1] != grid.n:
        raise ConfigurationError(f'Fields have {fields.shape[-1]} points, grid has {grid.n}')
    k_max = min(k_max, grid.n // 2 - 1)
    if k_max <= k_min:
        raise ConfigurationError(f'Grid of {grid.n} points leaves no modes in [{k_min}, {k_max}]')
    spectra = np.abs(np.fft.rfft(fields, axis=-1)).mean(axis=0)
    k = np.arange(k_min, k_max + 1)
    return float(np.polyfit(np.log(k), np.log(spectra[k]), 1)[0])
