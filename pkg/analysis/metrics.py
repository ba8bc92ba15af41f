"""
Distributional and forecast-verification metrics
Energy distance, sliced Wasserstein, NRMSE of ensemble mean and spread, CRPS,
spread-to-skill ratio and std-map correlation, plus the per-condition
MetricReport and its CSV.
Fields are flattened to vectors; ensembles are (K, *field_shape).
"""
import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from utils import rng as rng_streams
from utils.errors import UsageError

DEFAULT_PROJECTIONS = 128
NRMSE_GUARD = 1e-12
SSR_EPS = 1e-8
METRIC_NAMES = ('ED', 'SWD', 'NRMSE_m', 'NRMSE_s', 'CRPS', 'SSR', 'STD_CORR')


def as_cloud(X):
    """(K, *shape) -> (K, d) float array"""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    cloud = X.reshape(X.shape[0], -1)
    if cloud.shape[0] < 1:
        raise UsageError('A sample cloud needs at least one member')
    return cloud


# ============= DISTRIBUTIONAL =============

def energy_distance(X, Y):
    """V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|"""
    X, Y = as_cloud(X), as_cloud(Y)
    return float(2.0 * cdist(X, Y).mean() - cdist(X, X).mean() - cdist(Y, Y).mean())


def random_directions(d, P, rng):
    """P directions uniform on the unit sphere in R^d"""
    directions = rng.standard_normal((P, d))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def sliced_wasserstein(X, Y, P=DEFAULT_PROJECTIONS, seed=0, rng=None):
    """
    Mean over P random directions of the 1D W1 between projected clouds

    Unequal cloud sizes are subsampled to the smaller size with the same
    projection stream.
    """
    X, Y = as_cloud(X), as_cloud(Y)
    rng = rng or rng_streams.stream(seed, rng_streams.PROJECTIONS)
    if X.shape[0] != Y.shape[0]:
        size = min(X.shape[0], Y.shape[0])
        X = X[np.sort(rng.choice(X.shape[0], size, replace=False))]
        Y = Y[np.sort(rng.choice(Y.shape[0], size, replace=False))]
    directions = random_directions(X.shape[1], P, rng)
    px = np.sort(X @ directions.T, axis=0)
    py = np.sort(Y @ directions.T, axis=0)
    return float(np.mean(np.abs(px - py)))


# ============= ENSEMBLE MOMENTS =============

def ensemble_mean(X):
    return np.asarray(X, dtype=float).mean(axis=0)


def ensemble_std(X):
    """Pointwise population (1/K) standard deviation"""
    return np.asarray(X, dtype=float).std(axis=0)


def _nrmse(pred, true):
    rmse = np.sqrt(np.mean((pred - true) ** 2))
    return float(rmse / (np.sqrt(np.mean(true ** 2)) + NRMSE_GUARD))


def nrmse_mean(X, Y):
    """RMSE(mu_pred, mu_true) / sqrt(E[mu_true^2])"""
    return _nrmse(ensemble_mean(X), ensemble_mean(Y))


def nrmse_spread(X, Y):
    """RMSE(sigma_pred, sigma_true) / sqrt(E[sigma_true^2])"""
    return _nrmse(ensemble_std(X), ensemble_std(Y))


def std_map_correlation(X, Y):
    """
    Pearson correlation between predicted and true per-point std maps

    A map with no variation (a single member, or a spatially uniform spread)
    has no defined correlation and scores 0.
    """
    sx, sy = ensemble_std(X).ravel(), ensemble_std(Y).ravel()
    if np.ptp(sx) == 0 or np.ptp(sy) == 0:
        return 0.0
    return float(np.corrcoef(sx, sy)[0, 1])


def degenerate_truth_spread(X, Y):
    """True when the truth has no spread but the prediction does"""
    return bool(np.all(ensemble_std(Y) == 0) and np.any(ensemble_std(X) > 0))


# ============= SCORES =============

def crps(X, y):
    """
    Ensemble CRPS E|X-y| - 0.5 E|X-X'| per grid point, averaged over points

    The pair term uses the sorted-member identity
    E|X-X'| = 2/K^2 * sum_i (2i - K + 1) x_(i).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    K = X.shape[0]
    skill = np.abs(X - y).mean(axis=0)
    ranks = 2.0 * np.arange(K) - K + 1.0
    ranks = ranks.reshape((K,) + (1,) * (X.ndim - 1))
    spread = 2.0 / K ** 2 * np.sum(ranks * np.sort(X, axis=0), axis=0)
    return float(np.mean(skill - 0.5 * spread))


def ssr(X, y, eps=SSR_EPS):
    """sqrt(mean pointwise variance) / (RMSE of ensemble mean vs y + eps)"""
    X = np.asarray(X, dtype=float)
    spread = np.sqrt(np.mean(X.var(axis=0)))
    rmse = np.sqrt(np.mean((X.mean(axis=0) - y) ** 2))
    return float(spread / (rmse + eps))


def crps_over_truth(X, Y):
    """CRPS averaged over truth realizations"""
    return float(np.mean([crps(X, y) for y in Y]))


def ssr_over_truth(X, Y, eps=SSR_EPS):
    return float(np.mean([ssr(X, y, eps) for y in Y]))


# ============= REPORT =============

@dataclass
class MetricReport:
    """Per-condition metric rows plus their arithmetic means"""
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def metric_names(self):
        names = []
        for row in self.rows:
            names.extend(k for k in row if k not in names and k != 'condition' and k != 'flags')
        return names

    @property
    def means(self):
        return {name: float(np.mean([row[name] for row in self.rows if name in row]))
                for name in self.metric_names}

    def add(self, condition, values, flags=()):
        row = {'condition': condition}
        row.update(values)
        row['flags'] = ';'.join(flags)
        self.rows.append(row)
        return row

    def to_csv(self, path):
        """One row per condition and a final 'mean' row"""
        names = self.metric_names
        with open(path, 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(['condition'] + names + ['flags'] + sorted(self.meta))
            meta_values = [self.meta[k] for k in sorted(self.meta)]
            for row in self.rows:
                writer.writerow([row['condition']] + [row.get(n, '') for n in names] + [row['flags']] + meta_values)
            means = self.means
            writer.writerow(['mean'] + [means[n] for n in names] + [''] + meta_values)


def evaluate_condition(X, Y, P=DEFAULT_PROJECTIONS, seed=0, condition=0):
    """
    Every metric for one conditioning input

    Args:
        X (ndarray): (K, *shape) predicted ensemble
        Y (ndarray): (S, *shape) truth realizations

    Returns:
        tuple: (metric dict, list of flags)
    """
    flags = []
    if degenerate_truth_spread(X, Y):
        flags.append('zero_truth_spread')
    values = {
        'ED': energy_distance(X, Y),
        'SWD': sliced_wasserstein(X, Y, P, rng=rng_streams.stream(seed, rng_streams.PROJECTIONS, condition)),
        'NRMSE_m': nrmse_mean(X, Y),
        'NRMSE_s': nrmse_spread(X, Y),
        'CRPS': crps_over_truth(X, Y),
        'SSR': ssr_over_truth(X, Y) if np.asarray(X).shape[0] >= 2 else 0.0,
        'STD_CORR': std_map_correlation(X, Y),
    }
    return values, flags


def evaluate_ensembles(predictions, truths, P=DEFAULT_PROJECTIONS, seed=0, meta=None):
    """MetricReport over matched lists of prediction and truth ensembles"""
    report = MetricReport(meta=dict(meta or {}, P=P, seed=seed, nrmse_guard=NRMSE_GUARD, ssr_eps=SSR_EPS,
                                    crps_order='pointwise-then-average'))
    for c, (X, Y) in enumerate(zip(predictions, truths)):
        values, flags = evaluate_condition(X, Y, P, seed, c)
        report.add(c, values, flags)
    return report
