"""
Diffusion last layer
Conditional velocity matching in the r-dimensional coefficient space of a
frozen operator encoder, Euler sampling of the probability-flow ODE from
tau = 1 (noise) to tau = 0 (data), and decoding through the basis NO(a).
Also hosts the Gaussian stability probes used to check the W2 bound.
"""
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from models.fno import FnoBackbone
from models.operator_encoder import basis_array, channels_first, encode_array, reconstruct
from models.training import TrainSettings, train
from utils import diff_engine as de
from utils import rng as rng_streams
from utils.errors import NumericsError, UsageError

TIME_EMBEDDING_DIM = 32
CONDITION_DIM = 64
HIDDEN_WIDTH = 512
SAMPLER_STEPS = 10
ENSEMBLE_SIZE = 32


# ============= SCHEDULE =============

@dataclass(frozen=True)
class NoisingSchedule:
    """Rectified path x_tau = (1 - tau) x + tau eps"""
    steps: int = SAMPLER_STEPS

    @staticmethod
    def a(tau):
        return 1.0 - tau

    @staticmethod
    def b(tau):
        return tau

    @staticmethod
    def a_dot(tau=None):
        return -1.0

    @staticmethod
    def b_dot(tau=None):
        return 1.0

    def grid(self):
        """Sampler times 1, 1 - 1/T, ..., 1/T"""
        return 1.0 - np.arange(self.steps) / self.steps


def _column(tau, x):
    tau = np.asarray(tau, dtype=float)
    return tau.reshape(tau.shape + (1,) * (np.ndim(x) - tau.ndim))


def noise_sample(x, eps, tau):
    """(1 - tau) x + tau eps; tau may be a scalar or one value per row"""
    t = _column(tau, x)
    if np.any(t < 0) or np.any(t > 1):
        raise UsageError('tau must lie in [0, 1]')
    return (1.0 - t) * np.asarray(x) + t * np.asarray(eps)


def oracle_velocity(x, eps):
    """a_dot x + b_dot eps = eps - x"""
    return np.asarray(eps) - np.asarray(x)


def time_embedding(tau, dim=TIME_EMBEDDING_DIM):
    """Fixed sinusoidal embedding, frequencies geometric from 1 to 1000"""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    half = dim // 2
    frequencies = np.geomspace(1.0, 1000.0, half)
    angles = tau[:, None] * frequencies[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


# ============= NETWORK =============

class DiffusionLastLayer(de.Module):
    """
    Velocity network v(x_tau, tau, c) with its own conditioning FNO

    c is the pooled final FNO feature map of a passed through one affine
    layer; the MLP sees concat(x_tau, time embedding, c).
    """

    def __init__(self, dim, latent_dim=64, width=64, modes=32, hidden=HIDDEN_WIDTH,
                 condition_dim=CONDITION_DIM, seed=0, n_layers=4):
        self.latent_dim = latent_dim
        self.condition_net = FnoBackbone(1, width, width, modes, dim,
                                         rng_streams.stream(seed, rng_streams.INIT, 11), n_layers)
        self.condition_head = de.Linear(width, condition_dim, rng_streams.stream(seed, rng_streams.INIT, 12))
        sizes = [latent_dim + TIME_EMBEDDING_DIM + condition_dim, hidden, hidden, hidden, latent_dim]
        self.velocity_net = de.Mlp(sizes, rng_streams.stream(seed, rng_streams.INIT, 13))

    def condition(self, a):
        """(B, *spatial) -> (B, condition_dim)"""
        return self.condition_head(self.condition_net.pooled(a))

    def forward(self, x, tau, condition):
        emb = de.Tensor(time_embedding(tau).astype(condition.dtype))
        return self.velocity_net(de.concat([de.as_tensor(x), emb, condition], axis=-1))

    def velocity(self, x, tau, condition):
        """Numpy velocity for sampling; tau is a scalar shared by the batch"""
        taus = np.full(np.shape(x)[0], float(tau))
        return self.forward(x, taus, condition).data

    def describe(self):
        return {'latent_dim': self.latent_dim, 'condition_net': self.condition_net.describe(),
                'parameters': self.num_parameters()}


# ============= LOSS =============

def coefficient_velocity_loss(head, x, a, rng, velocity_hook=None, condition=None):
    """
    Velocity-matching loss for precomputed coefficients x = NF(u)

    Args:
        head (DiffusionLastLayer): velocity network (may be None with a hook)
        x (ndarray): (B, r) coefficients
        a (ndarray): (B, *spatial) conditioning inputs
        rng (Generator): source of tau ~ U(0, 1) and eps ~ N(0, I)
        velocity_hook (callable): optional hook(x_tau, tau, eps, x) -> (B, r)
            replacing the network
        condition (Tensor): precomputed condition embedding
    """
    x = np.asarray(x, dtype=float)
    B, r = x.shape
    tau = rng.uniform(size=B)
    eps = rng.standard_normal((B, r))
    x_tau = noise_sample(x, eps, tau)
    target = oracle_velocity(x, eps)
    if velocity_hook is not None:
        prediction = de.as_tensor(velocity_hook(x_tau, tau, eps, x))
    else:
        c = condition if condition is not None else head.condition(a)
        prediction = head(x_tau.astype(c.dtype), tau, c)
    loss = de.mul(de.sum(de.square(de.sub(prediction, target))), 1.0 / B)
    if not np.isfinite(loss.data).all():
        raise NumericsError('Non-finite velocity loss')
    return loss


def velocity_loss(head, encoder, a, u, seed=0, velocity_hook=None, rng=None):
    """Velocity-matching loss on a batch of (a, u) pairs with the encoder frozen"""
    x = encode_array(encoder, u)
    rng = rng or rng_streams.stream(seed, 'velocity-loss')
    return coefficient_velocity_loss(head, x, a, rng, velocity_hook)


# ============= SAMPLING =============

def euler_sample(velocity, x1, steps=SAMPLER_STEPS):
    """
    Integrate dx/dtau = v(x, tau) from tau = 1 to 0 with explicit Euler

    Each step applies x <- x - (1/steps) v(x, tau).
    """
    x = np.array(x1, dtype=float, copy=True)
    dt = 1.0 / steps
    for i, tau in enumerate(NoisingSchedule(steps).grid()):
        x = x - dt * velocity(x, tau)
        if not np.all(np.isfinite(x)):
            raise NumericsError(f'Non-finite sampler state at step {i + 1} (tau={tau:.3f})')
    return x


def sample_coefficients(head, a, K=ENSEMBLE_SIZE, steps=SAMPLER_STEPS, seed=0, velocity_hook=None, member_offset=0):
    """
    K coefficient draws for one condition, member k seeded by its own stream

    Returns:
        ndarray: (K, r)
    """
    r = head.latent_dim
    x1 = np.stack([rng_streams.stream(seed, 'sample', member_offset + k).standard_normal(r) for k in range(K)])
    if velocity_hook is not None:
        return euler_sample(velocity_hook, x1, steps)
    condition = head.condition(np.asarray(a)[None])
    c = de.Tensor(np.repeat(condition.data, K, axis=0))
    return euler_sample(lambda x, tau: head.velocity(x.astype(c.dtype), tau, c), x1, steps)


def sample(a, head, encoder, K=ENSEMBLE_SIZE, steps=SAMPLER_STEPS, seed=0, velocity_hook=None, member_offset=0):
    """
    K generated fields for one input a (normalized units)

    Returns:
        ndarray: (K, *spatial)
    """
    xi = sample_coefficients(head, a, K, steps, seed, velocity_hook, member_offset)
    phi = channels_first(basis_array(encoder, np.asarray(a)[None]))[0]
    return np.einsum('kr,r...->k...', xi, phi)


def sample_members(a_batch, head, encoder, steps=SAMPLER_STEPS, seeds=(0,), stream_index=0):
    """
    One generated field per row of a_batch; row i uses its own member stream

    Used by closed-loop rollouts where each member carries its own state.
    """
    a_batch = np.asarray(a_batch)
    r = head.latent_dim
    x1 = np.stack([rng_streams.stream(seed, 'member', stream_index).standard_normal(r) for seed in seeds])
    condition = head.condition(a_batch)
    xi = euler_sample(lambda x, tau: head.velocity(x.astype(condition.dtype), tau, condition), x1, steps)
    phi = channels_first(basis_array(encoder, a_batch))
    return reconstruct(xi, phi)


# ============= TRAINING =============

def train_dll(encoder, a, u, settings=None, width=64, modes=32, hidden=HIDDEN_WIDTH, seed=0,
              heldout=None, verbose=False, dtype=np.float64):
    """
    Stage 2: velocity matching with the operator encoder frozen

    Returns:
        tuple: (DiffusionLastLayer with EMA weights loaded, TrainingResult)
    """
    settings = settings or TrainSettings()
    encoder.freeze()
    x_all = encode_array(encoder, u)
    head = DiffusionLastLayer(a.ndim - 1, encoder.latent_dim, width, modes, hidden, seed=seed)
    head.astype(dtype)
    a = np.asarray(a, dtype=dtype)

    def loss_fn(indices, key):
        rng = rng_streams.stream(seed, rng_streams.NOISE, *key)
        return coefficient_velocity_loss(head, x_all[indices], a[indices], rng)

    heldout_fn = None
    if heldout:
        x_held = encode_array(encoder, heldout[1])

        def heldout_fn():
            rng = rng_streams.stream(seed, 'heldout')
            losses = [coefficient_velocity_loss(head, x_held[s:s + 128], heldout[0][s:s + 128], rng).item()
                      * len(x_held[s:s + 128]) for s in range(0, len(x_held), 128)]
            return float(np.sum(losses) / len(x_held))

    result = train(head, loss_fn, a.shape[0], settings, seed, heldout_fn, verbose, name='diffusion last layer')
    head.load_state(result.ema.shadow, strict=False)
    head.freeze()
    return head, result


# ============= STABILITY PROBES =============

def gaussian_velocity(mu, s):
    """Exact marginal velocity E[eps - x | x_tau = y] for x ~ N(mu, s^2)"""
    def velocity(y, tau):
        gain = (tau - (1.0 - tau) * s ** 2) / ((1.0 - tau) ** 2 * s ** 2 + tau ** 2)
        return -mu + gain * (y - (1.0 - tau) * mu)
    return velocity


def perturbation(y, tau):
    """Smooth bounded perturbation field w(y, tau) = 1 + sin(y) / 4"""
    return 1.0 + 0.25 * np.sin(y)


def sorted_w2(x, y):
    """W2 between equal-size 1D samples by sorted coupling"""
    return float(np.sqrt(np.mean((np.sort(x) - np.sort(y)) ** 2)))


def gaussian_quantiles(mu, s, n):
    return mu + s * norm.ppf((np.arange(n) + 0.5) / n)


def wasserstein_stability_probe(mu, s, delta, n_samples=10_000, steps=100, seed=0):
    """
    W2 of the law generated by the perturbed velocity v* + delta w, and its L_V

    Generated samples reuse the same starting draws for every delta; L_V is
    measured against the exact marginal velocity on fresh (tau, x_tau) draws.

    Returns:
        tuple: (W2, L_V)
    """
    exact = gaussian_velocity(mu, s)
    x1 = rng_streams.stream(seed, 'probe').standard_normal(n_samples)
    generated = euler_sample(lambda y, tau: exact(y, tau) + delta * perturbation(y, tau), x1, steps)
    w2 = sorted_w2(generated, gaussian_quantiles(mu, s, n_samples))

    rng = rng_streams.stream(seed, 'probe-loss')
    tau = rng.uniform(size=n_samples)
    x = mu + s * rng.standard_normal(n_samples)
    x_tau = noise_sample(x, rng.standard_normal(n_samples), tau)
    lv = float(np.mean((delta * perturbation(x_tau, tau)) ** 2))
    return w2, lv


def marginal_w2(X, Y):
    """Root-mean over grid points of squared sorted-coupling W2 between two ensembles"""
    X = np.sort(np.asarray(X).reshape(X.shape[0], -1), axis=0)
    Y = np.sort(np.asarray(Y).reshape(Y.shape[0], -1), axis=0)
    return float(np.sqrt(np.mean((X - Y) ** 2)))


def conditional_stability_probe(head, encoder, a, direction, deltas=(0.0, 0.025, 0.05, 0.075, 0.1),
                                K=ENSEMBLE_SIZE, steps=SAMPLER_STEPS, seed=0, weight=1.0):
    """
    W2 between output ensembles of a and a + delta * direction

    All ensembles share the sampling seed; the floor is the distance between
    two unperturbed ensembles drawn with different seeds.

    Returns:
        dict: distances, w2, slope, intercept, floor
    """
    base = sample(a, head, encoder, K, steps, seed)
    floor = marginal_w2(base, sample(a, head, encoder, K, steps, seed + 1))
    distances, w2 = [], []
    for delta in deltas:
        shifted = a + delta * direction
        distances.append(float(np.sqrt(np.sum(weight * (shifted - a) ** 2))))
        w2.append(marginal_w2(base, sample(shifted, head, encoder, K, steps, seed)))
    slope, intercept = np.polyfit(distances, w2, 1)
    return {'distances': distances, 'w2': w2, 'slope': float(slope), 'intercept': float(intercept),
            'floor': floor}
