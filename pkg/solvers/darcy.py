"""
Stochastic Darcy flow
Binary permeability and mixture-source samplers, the finite-volume operator
for -div(a grad u) = f with homogeneous Dirichlet boundaries, and a batched
conjugate-gradient solver.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.fft import idctn

from utils import rng as rng_streams
from utils.errors import ConfigurationError, FactorizationError

PERMEABILITY_HIGH = 12.0
PERMEABILITY_LOW = 3.0
SOURCE_MIX = 0.1
DRAW_CHUNK = 256

LOGNORMAL_SOURCE = 'lognormal-source'
SMOOTH_SOURCE = 'smooth-source'
PERMEABILITY_THRESHOLD = 'permeability-threshold'


@dataclass(frozen=True)
class GrfSpec:
    """Gaussian random field settings"""
    kind: str
    sigma: float
    length_scale: float
    jitter: float = 1e-5

    def __post_init__(self):
        if self.kind not in (LOGNORMAL_SOURCE, SMOOTH_SOURCE, PERMEABILITY_THRESHOLD):
            raise ConfigurationError(f'Unknown random field kind: {self.kind}')
        if not (self.sigma > 0 and self.length_scale > 0):
            raise ConfigurationError(f'Random field needs sigma > 0 and length scale > 0: {self}')

    def describe(self):
        return {'kind': self.kind, 'sigma': self.sigma, 'length_scale': self.length_scale, 'jitter': self.jitter}


DEFAULT_SOURCE_SPECS = (
    GrfSpec(LOGNORMAL_SOURCE, 10.0, 0.2),
    GrfSpec(SMOOTH_SOURCE, 10.0, 0.5),
)


@dataclass(frozen=True)
class CgConfig:
    tolerance: float = 1e-6
    max_iterations: int = 5000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigurationError(f'CG tolerance must be positive, got {self.tolerance}')


@dataclass
class CgResult:
    """Per-column CG outcome"""
    x: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    converged: np.ndarray


@dataclass
class DarcySolution:
    u: np.ndarray
    converged: bool
    iterations: int
    residual: float


def grid_points(n):
    """Vertex coordinates of the n x n grid on [0, 1]^2 (boundary included)"""
    x = np.linspace(0.0, 1.0, n)
    return np.meshgrid(x, x, indexing='ij')


def cell_volume(n):
    return (1.0 / (n - 1)) ** 2


# ============= RANDOM FIELDS =============

def sample_permeability(n, seed=0, offset=0.0, index=(), rng=None):
    """
    Two-level permeability from a thresholded DCT-II Gaussian random field

    Coefficient k has standard deviation (1 + k1^2 + k2^2)^-2 and the constant
    mode is removed. Positive values map to 12, the rest to 3.

    Args:
        n (int): grid points per axis, n >= 8
        seed (int): run seed
        offset (float): constant added before thresholding (test hook)
        index (tuple): stream indices
    """
    if n < 8:
        raise ConfigurationError(f'Permeability grid needs n >= 8, got {n}')
    rng = rng or rng_streams.stream(seed, 'permeability', *index)
    k1, k2 = np.meshgrid(np.arange(n), np.arange(n), indexing='ij')
    std = (1.0 + k1 ** 2 + k2 ** 2) ** -2.0
    std[0, 0] = 0.0
    field = idctn(std * rng.standard_normal((n, n)), type=2, norm='ortho') + offset
    return np.where(field > 0, PERMEABILITY_HIGH, PERMEABILITY_LOW)


def _embedding_cells(n, spec):
    """Power-of-two cell count of the periodic torus holding the unit square"""
    h = 1.0 / (n - 1)
    side = 1.0 + 8.0 * spec.length_scale
    cells = int(np.ceil(side / h))
    return 1 << max(cells - 1, 1).bit_length()


def rbf_eigenvalues(n, spec):
    """
    Circulant-embedding eigenvalues of exp(-|x-y|^2 / (2 l^2)) on the torus

    Small negative eigenvalues (below 1% of the largest) are clipped; larger
    ones mean the embedding is not positive semidefinite.
    """
    m = _embedding_cells(n, spec)
    h = 1.0 / (n - 1)
    idx = np.arange(m)
    d = np.minimum(idx, m - idx) * h
    dx, dy = np.meshgrid(d, d, indexing='ij')
    cov = np.exp(-(dx ** 2 + dy ** 2) / (2.0 * spec.length_scale ** 2))
    eigenvalues = np.fft.fft2(cov).real + spec.jitter
    floor = -0.01 * eigenvalues.max()
    if eigenvalues.min() < floor:
        raise FactorizationError(f'Covariance embedding is indefinite (min eigenvalue {eigenvalues.min():.3e}) for {spec}')
    return np.clip(eigenvalues, 0.0, None), m


def sample_rbf_field(n, spec, rng, count=None):
    """
    Zero-mean unit-variance RBF Gaussian field(s) on the n x n vertex grid

    Args:
        count (int): number of fields; None returns a single (n, n) field
    """
    eigenvalues, m = rbf_eigenvalues(n, spec)
    weights = np.sqrt(eigenvalues / (m * m))
    total = 1 if count is None else int(count)
    chunks = []
    for start in range(0, total, DRAW_CHUNK):
        size = min(DRAW_CHUNK, total - start)
        z = rng.standard_normal((size, m, m)) + 1j * rng.standard_normal((size, m, m))
        chunks.append(np.fft.fft2(weights * z).real[:, :n, :n])
    fields = np.concatenate(chunks)
    return fields[0] if count is None else fields


def sample_source(n, lam=SOURCE_MIX, specs=DEFAULT_SOURCE_SPECS, seed=0, index=(),
                  g_ln=None, g_gp=None, count=None):
    """
    Mixture source f = lam * s_ln * exp(G_ln) + (1 - lam) * s_gp * G_gp

    G_ln and G_gp come from independent streams. Passing g_ln / g_gp freezes
    the corresponding field.

    Returns:
        ndarray: (n, n), or (count, n, n) when count is given
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f'Source mixture weight must lie in [0, 1], got {lam}')
    spec_ln, spec_gp = specs
    if g_ln is None:
        g_ln = sample_rbf_field(n, spec_ln, rng_streams.stream(seed, 'source-ln', *index), count)
    if g_gp is None:
        g_gp = sample_rbf_field(n, spec_gp, rng_streams.stream(seed, 'source-gp', *index), count)
    return lam * spec_ln.sigma * np.exp(g_ln) + (1.0 - lam) * spec_gp.sigma * g_gp


# ============= OPERATOR =============

def assemble_operator(a):
    """
    5-point finite-volume matrix on the (n-2)^2 interior nodes

    Faces carry the harmonic mean of the two nodal permeabilities; faces
    touching the boundary use the interior node's own value.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    m = n - 2
    h2 = (1.0 / (n - 1)) ** 2
    interior = a[1:-1, 1:-1]
    index = np.arange(m * m).reshape(m, m)

    rows, cols, vals = [], [], []
    diagonal = np.zeros((m, m))
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        neighbour = a[1 + di:n - 1 + di, 1 + dj:n - 1 + dj]
        ni = np.arange(m)[:, None] + di
        nj = np.arange(m)[None, :] + dj
        on_boundary = (ni < 0) | (ni >= m) | (nj < 0) | (nj >= m)
        coef = np.where(on_boundary, interior, 2.0 * interior * neighbour / (interior + neighbour))
        diagonal += coef
        inside = ~on_boundary
        rows.append(index[inside])
        cols.append(index[np.clip(ni, 0, m - 1), np.clip(nj, 0, m - 1)][inside])
        vals.append(-coef[inside])
    rows.append(index.ravel())
    cols.append(index.ravel())
    vals.append(diagonal.ravel())
    matrix = sp.coo_matrix((np.concatenate(vals) / h2, (np.concatenate(rows), np.concatenate(cols))),
                           shape=(m * m, m * m))
    return matrix.tocsr()


def conjugate_gradient(A, b, cfg=CgConfig(), callback=None):
    """
    Column-wise conjugate gradients from a zero start

    Each column stops once its relative residual reaches cfg.tolerance; the
    best iterate seen is returned for columns that never get there.

    Args:
        A: symmetric positive-definite matrix (sparse or dense)
        b (ndarray): (m,) or (m, B) right-hand sides
        cfg (CgConfig): tolerance and iteration cap
        callback (callable): called as callback(iteration, x) after each sweep
    """
    single = b.ndim == 1
    B = b[:, None] if single else b
    x = np.zeros_like(B, dtype=float)
    r = B.astype(float).copy()
    p = r.copy()
    rs = np.sum(r * r, axis=0)
    b_norm = np.sqrt(np.sum(B * B, axis=0))
    safe_norm = np.where(b_norm > 0, b_norm, 1.0)
    relative = np.where(b_norm > 0, np.sqrt(rs) / safe_norm, 0.0)
    best_x, best_rel = x.copy(), relative.copy()
    iterations = np.zeros(B.shape[1], dtype=int)
    active = relative > cfg.tolerance

    for it in range(1, cfg.max_iterations + 1):
        if not active.any():
            break
        Ap = A @ p
        curvature = np.sum(p * Ap, axis=0)
        alpha = np.where(active, rs / np.where(curvature > 0, curvature, 1.0), 0.0)
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = np.sum(r * r, axis=0)
        beta = np.where(active, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = np.where(active, r + beta * p, p)
        rs = rs_new
        relative = np.sqrt(rs) / safe_norm
        iterations[active] = it
        better = relative < best_rel
        best_x[:, better] = x[:, better]
        best_rel = np.minimum(best_rel, relative)
        active = active & (relative > cfg.tolerance)
        if callback:
            callback(it, x[:, 0] if single else x)

    converged = best_rel <= cfg.tolerance
    result = CgResult(best_x, iterations, best_rel, converged)
    if single:
        result = CgResult(best_x[:, 0], iterations[:1], best_rel[:1], converged[:1])
    return result


def embed_interior(values, n):
    """Place (n-2)^2 interior values into an n x n field with zero boundary"""
    u = np.zeros(values.shape[:-1] + (n, n))
    u[..., 1:-1, 1:-1] = values.reshape(values.shape[:-1] + (n - 2, n - 2))
    return u


def solve_darcy(a, f, cfg=CgConfig(), verbose=True):
    """
    Solve -div(a grad u) = f with u = 0 on the boundary

    Args:
        a (ndarray): (n, n) two-level permeability
        f (ndarray): (n, n) source, or (S, n, n) sources sharing the same a

    Returns:
        DarcySolution: u with the boundary embedded; converged is False when any
        right-hand side hit max_iterations (the best iterate is returned)
    """
    a = np.asarray(a, dtype=float)
    f = np.asarray(f, dtype=float)
    n = a.shape[0]
    batched = f.ndim == 3
    rhs = f[..., 1:-1, 1:-1].reshape((-1, (n - 2) ** 2)).T
    result = conjugate_gradient(assemble_operator(a), rhs, cfg)
    u = embed_interior(result.x.T, n)
    converged = bool(result.converged.all())
    if not converged and verbose:
        print(f"⚠️ CG stopped at {cfg.max_iterations} iterations "
              f"(relative residual {result.residual.max():.2e})")
    return DarcySolution(u if batched else u[0], converged, int(result.iterations.max()), float(result.residual.max()))
