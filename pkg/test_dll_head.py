"""
Tests for the diffusion last layer: schedule, velocity loss, Euler sampler,
Gaussian stability probes and (slow) trained-model checks
"""
import numpy as np
import pytest

from models import dll_head
from models import operator_encoder as oe
from models.training import TrainSettings
from utils import diff_engine as de
from utils import rng as rng_streams
from utils.errors import NumericsError, UsageError


@pytest.fixture
def nets(tiny_net):
    encoder = oe.OperatorEncoder(1, tiny_net['latent_dim'], tiny_net['width'], tiny_net['modes'], seed=0)
    head = dll_head.DiffusionLastLayer(1, tiny_net['latent_dim'], tiny_net['width'], tiny_net['modes'],
                                       tiny_net['hidden'], condition_dim=8, seed=0)
    return head, encoder.freeze()


def deterministic_task(n, count, seed):
    alpha = rng_streams.stream(seed, 'dirac-task').standard_normal((count, 3))
    x = 2 * np.pi * np.arange(n) / n
    j = np.arange(1, 4)
    return alpha @ np.sin(np.outer(j, x)), alpha @ np.cos(np.outer(j, x))


# ============= SCHEDULE AND ORACLES =============

def test_schedule_endpoints():
    schedule = dll_head.NoisingSchedule()
    assert schedule.a(0.0) == 1.0 and schedule.b(0.0) == 0.0
    assert schedule.a(1.0) == 0.0 and schedule.b(1.0) == 1.0
    assert np.allclose(schedule.grid(), [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1])


def test_noise_sample_examples(rng):
    x, eps = rng.standard_normal((2, 5))
    assert np.array_equal(dll_head.noise_sample(x, eps, 0.0), x)
    assert np.array_equal(dll_head.noise_sample(x, eps, 1.0), eps)
    assert np.array_equal(dll_head.noise_sample(np.array([2.0, 0.0]), np.array([0.0, 2.0]), 0.5), [1.0, 1.0])
    rows = dll_head.noise_sample(np.ones((2, 3)), np.zeros((2, 3)), np.array([0.0, 1.0]))
    assert np.array_equal(rows, [[1, 1, 1], [0, 0, 0]])
    with pytest.raises(UsageError):
        dll_head.noise_sample(x, eps, 1.5)


def test_oracle_velocity_examples(rng):
    x = rng.standard_normal(4)
    assert np.array_equal(dll_head.oracle_velocity(x, x), np.zeros(4))
    assert np.array_equal(dll_head.oracle_velocity(np.array([1.0, 0.0]), np.array([0.0, 1.0])), [-1.0, 1.0])


def test_euler_follows_straight_path_exactly(rng):
    x, eps = rng.standard_normal((2, 6))
    reached = dll_head.euler_sample(lambda y, tau: dll_head.oracle_velocity(x, eps), eps, 10)
    assert np.abs(reached - x).max() < 1e-14


def test_euler_closed_form_products(rng):
    x1 = rng.standard_normal(3)
    contracted = dll_head.euler_sample(lambda y, tau: y, x1, 10)
    assert np.abs(contracted - 0.9 ** 10 * x1).max() < 1e-12
    assert abs(0.9 ** 10 - 0.3487) < 1e-4
    expanded = dll_head.euler_sample(lambda y, tau: -y, x1, 10)
    assert np.abs(expanded - 1.1 ** 10 * x1).max() < 1e-12


def test_euler_reports_non_finite_step():
    with pytest.raises(NumericsError, match='step 1'):
        dll_head.euler_sample(lambda y, tau: np.full_like(y, np.nan), np.ones(2), 10)


def test_time_embedding():
    emb = dll_head.time_embedding(np.array([0.0, 0.5, 1.0]))
    assert emb.shape == (3, dll_head.TIME_EMBEDDING_DIM)
    assert np.array_equal(emb[0], np.r_[np.zeros(16), np.ones(16)])


# ============= VELOCITY LOSS =============

def test_zero_predictor_loss_matches_moments():
    r, B = 4, 100_000
    x = np.tile([1.0, -2.0, 0.5, 0.0], (B, 1))
    rng = rng_streams.stream(0, 'zero-predictor')
    loss = dll_head.coefficient_velocity_loss(None, x, None, rng,
                                              velocity_hook=lambda x_tau, tau, eps, x0: np.zeros_like(x0)).item()
    norm2 = np.sum(x[0] ** 2)
    standard_error = np.sqrt((2 * r + 4 * norm2) / B)
    assert abs(loss - (r + norm2)) < 3 * standard_error


def test_oracle_predictor_loss_is_zero(rng):
    x = rng.standard_normal((64, 4))
    loss = dll_head.coefficient_velocity_loss(None, x, None, rng,
                                              velocity_hook=lambda x_tau, tau, eps, x0: eps - x0)
    assert loss.item() == 0.0


def test_velocity_loss_trains_head_only(nets, rng):
    head, encoder = nets
    a, u = rng.standard_normal((2, 4, 16))
    loss = dll_head.velocity_loss(head, encoder, a, u, seed=0)
    assert np.isfinite(loss.item()) and loss.item() >= 0
    assert loss.item() == dll_head.velocity_loss(head, encoder, a, u, seed=0).item()
    leaves = de.backward(loss)
    trainable = head.trainable()
    assert trainable and all(p in leaves for p in trainable.values())
    assert not any(p in leaves for p in encoder.parameters().values())


# ============= SAMPLING =============

def test_sampling_is_deterministic(nets, rng):
    head, encoder = nets
    a = rng.standard_normal(16)
    first = dll_head.sample(a, head, encoder, K=4, steps=3, seed=0)
    assert first.shape == (4, 16)
    assert np.array_equal(first, dll_head.sample(a, head, encoder, K=4, steps=3, seed=0))
    assert not np.allclose(first, dll_head.sample(a, head, encoder, K=4, steps=3, seed=1))
    assert first.std(axis=0).min() > 0


def test_sampling_with_hook_decodes_closed_form(nets, rng):
    head, encoder = nets
    a = rng.standard_normal(16)
    xi = dll_head.sample_coefficients(head, a, K=3, steps=10, seed=2, velocity_hook=lambda x, tau: x)
    x1 = np.stack([rng_streams.stream(2, 'sample', k).standard_normal(head.latent_dim) for k in range(3)])
    assert np.abs(xi - 0.9 ** 10 * x1).max() < 1e-12
    fields = dll_head.sample(a, head, encoder, K=3, steps=10, seed=2, velocity_hook=lambda x, tau: x)
    phi = oe.channels_first(oe.basis_array(encoder, a[None]))[0]
    assert np.allclose(fields, np.einsum('kr,rn->kn', xi, phi))
    assert np.allclose(fields[0], oe.reconstruct(xi[0], phi))


def test_members_follow_their_own_streams(nets, rng):
    head, encoder = nets
    a = rng.standard_normal((3, 16))
    out = dll_head.sample_members(a, head, encoder, steps=2, seeds=(5, 6, 7), stream_index=1)
    assert out.shape == (3, 16)
    again = dll_head.sample_members(a[:1], head, encoder, steps=2, seeds=(5,), stream_index=1)
    assert np.allclose(out[0], again[0], atol=1e-12)


def test_gaussian_target_is_sampled():
    x1 = rng_streams.stream(0, 'gaussian-target').standard_normal(10_000)
    samples = dll_head.euler_sample(dll_head.gaussian_velocity(3.0, 0.5), x1, 100)
    assert abs(samples.mean() - 3.0) < 0.05
    assert abs(samples.std() - 0.5) < 0.05


# ============= STABILITY PROBES =============

def test_unperturbed_probe_hits_the_floor():
    w2, lv = dll_head.wasserstein_stability_probe(3.0, 0.5, 0.0)
    assert w2 < 0.02
    assert lv < 1e-10


def test_perturbation_sweep_scales_with_root_loss():
    results = [dll_head.wasserstein_stability_probe(3.0, 0.5, delta) for delta in (0.05, 0.1, 0.2)]
    w2 = [r[0] for r in results]
    assert np.all(np.diff(w2) >= 0)
    ratios = [w / np.sqrt(lv) for w, lv in results]
    assert max(ratios) / min(ratios) < 10


def test_sorted_w2_and_marginal_w2(rng):
    x = rng.standard_normal(100)
    assert dll_head.sorted_w2(x, x[::-1]) == 0.0
    assert abs(dll_head.sorted_w2(x, x + 0.3) - 0.3) < 1e-12
    X = rng.standard_normal((8, 4, 4))
    assert dll_head.marginal_w2(X, X[::-1]) == 0.0
    assert abs(dll_head.marginal_w2(X, X - 1.0) - 1.0) < 1e-12


def test_conditional_probe_structure(nets, rng):
    head, encoder = nets
    a = rng.standard_normal(16)
    direction = rng.standard_normal(16)
    probe = dll_head.conditional_stability_probe(head, encoder, a, direction, K=4, steps=2, weight=2 * np.pi / 16)
    assert len(probe['w2']) == len(probe['distances']) == 5
    assert probe['distances'][0] == 0.0 and probe['w2'][0] == 0.0
    assert probe['floor'] > 0
    assert np.isfinite(probe['slope'])


def test_train_dll_freezes_both_networks(rng):
    encoder = oe.OperatorEncoder(1, 4, 4, 4, seed=0)
    a, u = rng.standard_normal((2, 8, 16))
    settings = TrainSettings(epochs=2, batch_size=4)
    head, result = dll_head.train_dll(encoder, a, u, settings, width=4, modes=4, hidden=8, seed=0,
                                      heldout=(a[:2], u[:2]))
    assert head.trainable() == {} and encoder.trainable() == {}
    assert len(result.curve) == 3
    assert all(np.isfinite(row['heldout_loss']) for row in result.curve)


# ============= TRAINED MODELS =============

@pytest.fixture(scope='module')
def trained_dirac():
    n, weight = 32, 2 * np.pi / 32
    a, u = deterministic_task(n, 256, seed=0)
    encoder, _ = oe.train_operator_encoder(a, u, weight, TrainSettings(epochs=60, batch_size=32, lr=3e-3,
                                                                       ema_decay=0.99),
                                           latent_dim=8, width=16, modes=8, seed=0)
    head, _ = dll_head.train_dll(encoder, a, u, TrainSettings(epochs=200, batch_size=32, lr=1e-3, ema_decay=0.99),
                                 width=16, modes=8, hidden=64, seed=0)
    return encoder, head


@pytest.mark.slow
def test_dirac_conditional_collapses(trained_dirac):
    encoder, head = trained_dirac
    test_a, test_u = deterministic_task(32, 8, seed=5)

    x_held = oe.encode_array(encoder, test_u)
    trained = dll_head.coefficient_velocity_loss(head, x_held, test_a, rng_streams.stream(0, 'held')).item()
    baseline = dll_head.coefficient_velocity_loss(None, x_held, test_a, rng_streams.stream(0, 'held'),
                                                  velocity_hook=lambda x_tau, tau, eps, x: np.zeros_like(x)).item()
    assert trained < baseline

    for i in range(4):
        ensemble = dll_head.sample(test_a[i], head, encoder, K=16, seed=i)
        rms = np.sqrt(np.mean(test_u[i] ** 2))
        assert ensemble.std(axis=0).max() < 0.1 * rms


@pytest.mark.slow
def test_trained_model_is_conditionally_stable(trained_dirac):
    encoder, head = trained_dirac
    test_a, _ = deterministic_task(32, 1, seed=6)
    direction = rng_streams.stream(0, 'direction').standard_normal(32)
    direction /= np.linalg.norm(direction)
    probe = dll_head.conditional_stability_probe(head, encoder, test_a[0], direction, weight=2 * np.pi / 32)
    assert np.isfinite(probe['slope'])
    assert probe['intercept'] < 2 * max(probe['floor'], 1e-12)
