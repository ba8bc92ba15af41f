"""
Operator encoder
NO(a) emits r basis fields, NF(u) emits r coefficients and the decoder is the
pointwise combination u_hat = sum_k xi_k phi_k. Stage 1 trains both networks
on the reconstruction loss E || u - NF(u)^T NO(a) ||^2.
"""
import numpy as np

from analysis import kl
from models.fno import FnoBackbone
from models.training import TrainSettings, check_loss, train
from utils import diff_engine as de
from utils import rng as rng_streams
from utils.errors import NumericsError, UsageError

EVAL_CHUNK = 128


class OperatorEncoder(de.Module):
    """The (NF, NO) pair"""

    def __init__(self, dim, latent_dim=64, width=64, modes=32, seed=0, n_layers=4):
        self.dim = dim
        self.latent_dim = latent_dim
        self.basis_net = FnoBackbone(1, latent_dim, width, modes, dim,
                                     rng_streams.stream(seed, rng_streams.INIT, 1), n_layers)
        self.encoder_net = FnoBackbone(1, width, width, modes, dim,
                                       rng_streams.stream(seed, rng_streams.INIT, 2), n_layers)
        self.encoder_head = de.Linear(width, latent_dim, rng_streams.stream(seed, rng_streams.INIT, 3))

    def basis(self, a):
        """NO(a): (B, *spatial, r) channels-last"""
        return self.basis_net(a)

    def encode(self, u):
        """NF(u): pooled final features then one affine map to R^r"""
        return self.encoder_head(self.encoder_net.pooled(u))

    def describe(self):
        return {'latent_dim': self.latent_dim, 'basis_net': self.basis_net.describe(),
                'encoder_net': self.encoder_net.describe(), 'parameters': self.num_parameters()}


def reconstruct(xi, phi):
    """
    Pointwise linear combination of basis fields

    Args:
        xi (ndarray): (r,) or (B, r) coefficients
        phi (ndarray): (r, *spatial) or (B, r, *spatial) basis fields

    Returns:
        ndarray: (*spatial) or (B, *spatial)
    """
    xi = np.asarray(xi)
    phi = np.asarray(phi)
    if xi.ndim == 1:
        if phi.shape[0] != xi.shape[0]:
            raise UsageError(f'{xi.shape[0]} coefficients for {phi.shape[0]} basis fields')
        return np.tensordot(xi, phi, axes=(0, 0))
    if phi.shape[:2] != xi.shape:
        raise UsageError(f'coefficients {xi.shape} do not match basis {phi.shape[:2]}')
    return np.einsum('br,br...->b...', xi, phi)


def reconstruct_tensor(xi, phi):
    """Recorded reconstruction: xi (B, r), channels-last phi (B, *spatial, r)"""
    if xi.shape[-1] != phi.shape[-1] or xi.shape[0] != phi.shape[0]:
        raise UsageError(f'coefficients {xi.shape} do not match basis {phi.shape}')
    spatial_ndim = phi.ndim - 2
    xi = de.reshape(xi, (xi.shape[0],) + (1,) * spatial_ndim + (xi.shape[-1],))
    return de.sum(de.mul(xi, phi), axis=-1)


def channels_first(phi):
    """(B, *spatial, r) -> (B, r, *spatial)"""
    return np.moveaxis(np.asarray(phi), -1, 1)


def gram_coefficients(u, phi, weight):
    """
    Per-sample Gram-optimal coefficients for each sample's own basis

    Args:
        u (ndarray): (B, *spatial)
        phi (ndarray): (B, *spatial, r) channels-last basis
    """
    fields = channels_first(phi)
    return np.stack([kl.projection_coefficients(u[i], fields[i], weight) for i in range(u.shape[0])])


def encoder_loss(model, a, u, weight=1.0, coefficient_hook=None, batch_index=0):
    """
    L_OE over a batch: mean over samples of the quadrature norm of u - xi^T Phi

    Args:
        model (OperatorEncoder): NF/NO pair
        a, u (ndarray): (B, *spatial) inputs and targets
        weight (float): quadrature cell volume
        coefficient_hook (callable): optional hook(u, phi_array) -> (B, r)
            coefficients used in place of NF(u)
        batch_index (int): reported when the loss is non-finite
    """
    u = np.asarray(u)
    if u.shape[0] == 0:
        raise UsageError('encoder_loss needs a nonempty batch')
    phi = model.basis(a)
    if coefficient_hook is not None:
        xi = de.Tensor(coefficient_hook(u, phi.data))
    else:
        xi = model.encode(u)
    residual = de.sub(u, reconstruct_tensor(xi, phi))
    loss = de.mul(de.sum(de.square(residual)), weight / u.shape[0])
    if not np.isfinite(loss.data).all():
        raise NumericsError(f'Non-finite encoder loss in batch {batch_index}')
    return loss


def chunked(fn, arrays, chunk=EVAL_CHUNK):
    """Apply fn to aligned chunks of arrays and concatenate the numpy outputs"""
    total = arrays[0].shape[0]
    if total == 0:
        raise UsageError('Cannot evaluate on an empty set')
    outputs = [fn(*[x[s:s + chunk] for x in arrays]) for s in range(0, total, chunk)]
    return np.concatenate(outputs)


def encode_array(model, u):
    return chunked(lambda batch: model.encode(batch).data, [np.asarray(u)])


def basis_array(model, a):
    return chunked(lambda batch: model.basis(batch).data, [np.asarray(a)])


def mean_encoder_loss(model, a, u, weight):
    """Full-set L_OE in chunks"""
    losses = chunked(lambda aa, uu: np.array([encoder_loss(model, aa, uu, weight).item() * uu.shape[0]]), [a, u])
    return float(losses.sum() / u.shape[0])


def reconstruction_nrmse(model, a, u):
    """||u - u_hat|| / ||u|| over a set (grid-uniform norms)"""
    def error(aa, uu):
        phi = model.basis(aa)
        xi = model.encode(uu)
        recon = reconstruct_tensor(xi, phi).data
        return np.array([[np.sum((uu - recon) ** 2), np.sum(uu ** 2)]])

    totals = chunked(error, [np.asarray(a), np.asarray(u)]).sum(axis=0)
    return float(np.sqrt(totals[0] / max(totals[1], 1e-300)))


def train_operator_encoder(a, u, weight, settings=None, latent_dim=64, width=64, modes=32, seed=0,
                           heldout=None, verbose=False, dtype=np.float64):
    """
    Stage 1: fit NF and NO jointly on L_OE

    Args:
        a, u (ndarray): normalized training inputs and targets (N, *spatial)
        weight (float): quadrature cell volume
        heldout (tuple): optional (a, u) held-out arrays

    Returns:
        tuple: (OperatorEncoder with EMA weights loaded, TrainingResult)
    """
    settings = settings or TrainSettings()
    model = OperatorEncoder(a.ndim - 1, latent_dim, width, modes, seed)
    model.astype(dtype)
    a, u = np.asarray(a, dtype=dtype), np.asarray(u, dtype=dtype)

    def loss_fn(indices, key):
        return encoder_loss(model, a[indices], u[indices], weight, batch_index=key[1])

    heldout_fn = (lambda: mean_encoder_loss(model, heldout[0], heldout[1], weight)) if heldout else None
    result = train(model, loss_fn, a.shape[0], settings, seed, heldout_fn, verbose, name='operator encoder')
    model.load_state(result.ema.shadow, strict=False)
    if heldout:
        initial = result.curve[0]['heldout_loss']
        final = check_loss(mean_encoder_loss(model, heldout[0], heldout[1], weight),
                           'operator encoder held-out evaluation')
        if not final < initial:
            raise NumericsError(f'Operator encoder did not improve on the held-out split: '
                                f'{final:.4e} after training vs {initial:.4e} at initialization')
    return model, result
