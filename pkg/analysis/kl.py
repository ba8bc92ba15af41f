"""
Karhunen-Loeve analysis of conditional ensembles
Snapshot-method eigendecomposition of the empirical covariance, weighted
orthogonal projection onto a basis, and the optimal rank-r residual.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from utils.errors import IllConditionedBasisError, UsageError

CONDITION_LIMIT = 1e8


@dataclass
class ConditionalEnsemble:
    """M samples drawn for one fixed input; weight is the quadrature cell volume"""
    samples: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.shape[0] < 2:
            raise UsageError('A conditional ensemble needs at least two samples')

    @property
    def field_shape(self):
        return self.samples.shape[1:]


@dataclass
class KlBasis:
    """Eigenvalues (nonincreasing) with weighted-orthonormal eigenfields"""
    eigenvalues: np.ndarray
    fields: np.ndarray
    mean: np.ndarray
    weight: float = 1.0

    @property
    def trace(self):
        return float(self.eigenvalues.sum())


def inner(u, v, weight=1.0):
    """Quadrature inner product over the trailing field axes (v may be batched or not)"""
    u, v = np.asarray(u), np.asarray(v)
    field_ndim = min(u.ndim, v.ndim)
    product = weight * u * v
    return np.sum(product, axis=tuple(range(product.ndim - field_ndim, product.ndim)))


def empirical_kl(ens):
    """
    Snapshot-method KL decomposition with 1/M covariance normalization

    Eigenvectors V of the M x M Gram matrix of centered samples lift to
    eigenfields e_k = sum_i V_ik u_i / sqrt(M lambda_k). Zero-variance
    directions are completed by Gram-Schmidt so that min(M, d) orthonormal
    fields are always returned. Signs make <e_k, u_1 - mean> nonnegative.

    Args:
        ens (ConditionalEnsemble): samples sharing one conditioning input

    Returns:
        KlBasis
    """
    M = ens.samples.shape[0]
    X = ens.samples.reshape(M, -1)
    d = X.shape[1]
    w = np.broadcast_to(np.asarray(ens.weight, dtype=float), ens.field_shape).reshape(-1)
    mean = X.mean(axis=0)
    centered = X - mean

    gram = (centered * w) @ centered.T / M
    values, vectors = eigh(gram)
    order = np.argsort(values)[::-1]
    values, vectors = np.clip(values[order], 0.0, None), vectors[:, order]

    count = min(M, d)
    scale = values[0] if values.size else 0.0
    tolerance = max(scale, 1.0) * 1e-12
    fields = []
    for k in range(count):
        if values[k] > tolerance:
            fields.append(centered.T @ vectors[:, k] / np.sqrt(M * values[k]))
    kept = len(fields)
    values = np.concatenate([values[:kept], np.zeros(count - kept)])
    fields = _complete_basis(fields, count, d, w)

    first = centered[0]
    for k, e in enumerate(fields):
        projection = np.sum(w * e * first)
        if abs(projection) > 1e-12 * max(np.sqrt(np.sum(w * first * first)), 1e-300):
            sign = np.sign(projection)
        else:
            sign = np.sign(e[np.argmax(np.abs(e))]) or 1.0
        fields[k] = sign * e

    return KlBasis(values, np.stack(fields).reshape((count,) + ens.field_shape),
                   mean.reshape(ens.field_shape), ens.weight)


def _complete_basis(fields, count, d, w):
    """Extend weighted-orthonormal fields with standard basis vectors"""
    fields = list(fields)
    candidate = 0
    while len(fields) < count and candidate < d:
        v = np.zeros(d)
        v[candidate] = 1.0 / np.sqrt(w[candidate])
        candidate += 1
        for e in fields:
            v = v - np.sum(w * e * v) * e
        norm = np.sqrt(np.sum(w * v * v))
        if norm > 1e-8:
            fields.append(v / norm)
    return fields


def projection_coefficients(u, basis_fields, weight=1.0):
    """
    Normal-equation coefficients xi* = G^-1 b(u)

    Args:
        u (ndarray): (*shape) or (B, *shape)
        basis_fields (ndarray): (r, *shape)

    Returns:
        ndarray: (r,) or (B, r)
    """
    S = np.asarray(basis_fields, dtype=float)
    r = S.shape[0]
    field_shape = S.shape[1:]
    u = np.asarray(u, dtype=float)
    single = u.shape == field_shape
    U = u.reshape((-1, int(np.prod(field_shape))))
    S_flat = S.reshape(r, -1)
    w = np.broadcast_to(np.asarray(weight, dtype=float), field_shape).reshape(-1)

    G = (S_flat * w) @ S_flat.T
    condition = np.linalg.cond(G)
    if not np.isfinite(condition) or condition >= CONDITION_LIMIT:
        raise IllConditionedBasisError(f'Gram matrix condition number {condition:.3e} >= {CONDITION_LIMIT:.0e}')
    b = (U * w) @ S_flat.T
    xi = np.linalg.solve(G, b.T).T
    return xi[0] if single else xi


def project(u, basis_fields, weight=1.0):
    """Weighted orthogonal projection of u onto span(basis_fields)"""
    S = np.asarray(basis_fields, dtype=float)
    xi = projection_coefficients(u, S, weight)
    return np.tensordot(xi, S, axes=(-1, 0))


def optimal_rank_r_error(basis, r):
    """Expected squared residual of the rank-r KL truncation: sum of lambda_k for k > r"""
    if r < 0:
        raise UsageError(f'rank must be nonnegative, got {r}')
    return float(basis.eigenvalues[r:].sum())


def subspace_residual(ens, basis_fields):
    """Mean squared residual of the centered samples after projection onto a subspace"""
    centered = ens.samples - ens.samples.mean(axis=0)
    if len(basis_fields) == 0:
        residual = centered
    else:
        residual = centered - project(centered, basis_fields, ens.weight)
    w = np.broadcast_to(np.asarray(ens.weight, dtype=float), ens.field_shape)
    axes = tuple(range(1, residual.ndim))
    return float(np.mean(np.sum(w * residual * residual, axis=axes)))


def rank_ladder(latent_dim):
    """1, 2, 4, ... up to latent_dim (always included)"""
    ranks, r = [], 1
    while r < latent_dim:
        ranks.append(r)
        r *= 2
    ranks.append(latent_dim)
    return ranks


def spectrum_rows(dataset, latent_dim):
    """
    KL spectrum rows for every condition of a multi-realization split

    Returns:
        tuple: (eigenvalue rows, tail rows) ready for CSV export
    """
    if dataset.realizations < 2:
        raise UsageError(f'{dataset.system}/{dataset.split} has one realization per input; no conditional spectrum')
    eigen_rows, tail_rows = [], []
    ranks = rank_ladder(latent_dim)
    for c in range(dataset.n_items):
        basis = empirical_kl(ConditionalEnsemble(dataset.outputs[c], dataset.cell_volume))
        for k, value in enumerate(basis.eigenvalues):
            eigen_rows.append({'condition': c, 'k': k + 1, 'eigenvalue': float(value)})
        for r in ranks:
            tail_rows.append({'condition': c, 'rank': r, 'optimal_error': optimal_rank_r_error(basis, r),
                              'trace': basis.trace})
    return eigen_rows, tail_rows
