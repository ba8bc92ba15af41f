"""
Deterministic FNO baseline
One-step surrogate a -> u trained with mean squared error; its ensembles
carry zero spread.
"""
import numpy as np

from models.fno import FnoBackbone
from models.operator_encoder import chunked
from models.training import TrainSettings, train
from utils import diff_engine as de
from utils import rng as rng_streams
from utils.errors import NumericsError


class DeterministicFno(de.Module):
    def __init__(self, dim, width=64, modes=32, seed=0, n_layers=4):
        self.net = FnoBackbone(1, 1, width, modes, dim, rng_streams.stream(seed, rng_streams.INIT, 21), n_layers)

    def forward(self, a):
        out = self.net(a)
        return de.reshape(out, out.shape[:-1])

    def predict(self, a):
        """Numpy predictions in chunks"""
        return chunked(lambda batch: self.forward(batch).data, [np.asarray(a)])

    def describe(self):
        return {'net': self.net.describe(), 'parameters': self.num_parameters()}


def mse_loss(model, a, u, batch_index=0):
    loss = de.mul(de.sum(de.square(de.sub(model(a), u))), 1.0 / np.asarray(u).size)
    if not np.isfinite(loss.data).all():
        raise NumericsError(f'Non-finite baseline loss in batch {batch_index}')
    return loss


def train_fno(a, u, settings=None, width=64, modes=32, seed=0, heldout=None, verbose=False, dtype=np.float64):
    """
    Fit the deterministic baseline

    Returns:
        tuple: (DeterministicFno with EMA weights loaded, TrainingResult)
    """
    settings = settings or TrainSettings()
    model = DeterministicFno(a.ndim - 1, width, modes, seed)
    model.astype(dtype)
    a, u = np.asarray(a, dtype=dtype), np.asarray(u, dtype=dtype)

    def loss_fn(indices, key):
        return mse_loss(model, a[indices], u[indices], key[1])

    heldout_fn = None
    if heldout:
        def heldout_fn():
            pred = model.predict(heldout[0])
            return float(np.mean((pred - heldout[1]) ** 2))

    result = train(model, loss_fn, a.shape[0], settings, seed, heldout_fn, verbose, name='deterministic FNO')
    model.load_state(result.ema.shadow, strict=False)
    model.freeze()
    return model, result
