"""
Oracle self-checks for the DLL laboratory
Each check compares a numerical routine against a closed form or a reference
computation and prints a ✅ / ❌ line. run_checks returns the names that failed.
"""
import sys

import numpy as np

from analysis import kl, metrics
from models import dll_head
from solvers import darcy, spectral
from utils import diff_engine as de
from utils import rng as rng_streams


# ============= ORACLES =============

GRADIENT_FLOOR = 1e-3


def max_gradient_error(loss_fn, params, h=1e-5, floor=GRADIENT_FLOOR, entries=None):
    """
    Largest relative gap between central differences and reverse-mode gradients

    Each entry scores |numeric - grad| / max(|numeric|, |grad|, floor); the
    floor keeps round-off on near-zero gradients from dominating.

    Args:
        loss_fn (callable): returns a scalar Tensor
        params (list): Tensors whose entries are perturbed in place
        entries (int): check only the first entries of each parameter (all by default)
    """
    leaves = de.backward(loss_fn())
    worst = 0.0
    for p in params:
        grad = leaves[p]
        count = p.size if entries is None else min(p.size, entries)
        for flat in range(count):
            index = np.unravel_index(flat, p.shape)
            original = p.data[index]
            p.data[index] = original + h
            up = loss_fn().item()
            p.data[index] = original - h
            down = loss_fn().item()
            p.data[index] = original
            numeric = (up - down) / (2.0 * h)
            scale = max(abs(numeric), abs(grad[index]), floor)
            worst = max(worst, abs(numeric - grad[index]) / scale)
    return worst


def gradient_check():
    """Reverse-mode gradients of a small FNO-style graph against central differences"""
    rng = rng_streams.stream(0, 'selfcheck', 1)
    mlp = de.Mlp([3, 5, 2], rng)
    conv = de.SpectralConv(2, 2, (2,), rng)
    x = rng.standard_normal((2, 8, 3))

    def loss():
        return de.sum(de.square(conv(mlp(x))))

    params = list(mlp.parameters().values()) + list(conv.parameters().values())
    worst = max_gradient_error(loss, params, entries=3)
    return worst < 1e-6, f'max relative gradient error {worst:.2e}'


def fft_check():
    rng = rng_streams.stream(0, 'selfcheck', 2)
    x = rng.standard_normal(64)
    spectrum = de.fft_forward(x, (0,))
    roundtrip = np.abs(de.fft_inverse(spectrum) - x).max()
    parseval = abs(np.sum(np.abs(spectrum.values) ** 2) / 64 - np.sum(x ** 2))
    return roundtrip < 1e-12 and parseval < 1e-10, f'roundtrip {roundtrip:.1e}, Parseval {parseval:.1e}'


def heat_check():
    """ETDRK on u_t = u_xx reproduces the exact propagator"""
    grid = spectral.PeriodicGrid(1, 64)
    table = spectral.build_etdrk_table(-grid.wavenumber_squared(), 0.01, order=4, grid=grid)
    x = grid.coordinates()
    v = grid.to_spectral(np.sin(3 * x) + 0.5 * np.cos(x))
    stepped = grid.to_physical(spectral.etdrk_step(table, v, lambda w, t: np.zeros_like(w)))
    exact = np.exp(-0.09) * np.sin(3 * x) + 0.5 * np.exp(-0.01) * np.cos(x)
    error = np.abs(stepped - exact).max()
    return error < 1e-12, f'max error {error:.1e}'


def forced_scalar_error(order, h, lam=-1.0, horizon=1.0):
    """Error at t = horizon for u' = lam u + cos t, u(0) = 1"""
    table = spectral.build_etdrk_table(np.array([lam]), h, order=order)
    v = np.array([1.0])
    steps = int(round(horizon / h))
    for i in range(steps):
        v = spectral.etdrk_step(table, v, lambda w, t: np.full_like(w, np.cos(t)), i * h)
    B = 1.0 / (1.0 + lam ** 2)
    A = -lam * B
    exact = (1.0 - A) * np.exp(lam * horizon) + A * np.cos(horizon) + B * np.sin(horizon)
    return abs(float(v[0]) - exact)


def convergence_slope(order, steps=(1 / 20, 1 / 40, 1 / 80, 1 / 160)):
    errors = [forced_scalar_error(order, h) for h in steps]
    return float(np.polyfit(np.log(steps), np.log(errors), 1)[0])


def etdrk_order_check():
    slope2, slope4 = convergence_slope(2), convergence_slope(4)
    ok = abs(slope2 - 2.0) <= 0.3 and 3.7 <= slope4 <= 4.3
    return ok, f'ETDRK2 slope {slope2:.2f}, ETDRK4 slope {slope4:.2f}'


def ks_mean_check():
    grid = spectral.PeriodicGrid(1, 64, spectral.KS_LENGTH)
    stepper = spectral.KuramotoSivashinsky(grid)
    u0 = spectral.sample_initial_condition(grid, seed=0, mean=0.3)
    u1 = stepper.advance(u0, 1)
    drift = abs(u1.mean() - u0.mean())
    return drift <= 1e-10, f'mean drift {drift:.1e} over one macro step'


def darcy_cg_check():
    a = darcy.sample_permeability(16, seed=0)
    f = darcy.sample_source(16, seed=0)
    A = darcy.assemble_operator(a)
    rhs = f[1:-1, 1:-1].ravel()
    dense = np.linalg.solve(A.toarray(), rhs)
    result = darcy.conjugate_gradient(A, rhs, darcy.CgConfig(tolerance=1e-10))
    error = np.linalg.norm(result.x - dense) / np.linalg.norm(dense)
    return error < 1e-5, f'CG vs dense relative error {error:.1e}'


def manufactured_darcy_error(n):
    X, Y = darcy.grid_points(n)
    exact = np.sin(np.pi * X) * np.sin(np.pi * Y)
    f = 2.0 * np.pi ** 2 * exact
    u = darcy.solve_darcy(np.ones((n, n)), f, darcy.CgConfig(tolerance=1e-12), verbose=False).u
    return float(np.abs(u - exact).max())


def darcy_order_check():
    coarse, fine = manufactured_darcy_error(17), manufactured_darcy_error(33)
    slope = np.log(coarse / fine) / np.log(2.0)
    return abs(slope - 2.0) <= 0.2, f'manufactured-solution slope {slope:.2f}'


def kl_optimality_check():
    rng = rng_streams.stream(0, 'selfcheck', 3)
    scales = 2.0 ** -np.arange(12)
    samples = (rng.standard_normal((40, 12)) * scales) @ np.linalg.qr(rng.standard_normal((12, 12)))[0]
    ens = kl.ConditionalEnsemble(samples, 0.5)
    basis = kl.empirical_kl(ens)
    r = 3
    optimal = kl.optimal_rank_r_error(basis, r)
    achieved = kl.subspace_residual(ens, basis.fields[:r])
    margin = min(kl.subspace_residual(ens, rng.standard_normal((r, 12))) - optimal for _ in range(50))
    ok = abs(achieved - optimal) < 1e-10 * max(1.0, basis.trace) and margin >= -1e-9
    return ok, f'rank-{r} residual {achieved:.4e} vs tail {optimal:.4e}, random margin {margin:.2e}'


def projection_check():
    rng = rng_streams.stream(0, 'selfcheck', 4)
    fields = rng.standard_normal((4, 16))
    u = rng.standard_normal(16)
    once = kl.project(u, fields, 0.25)
    twice = kl.project(once, fields, 0.25)
    error = np.abs(once - twice).max()
    return error < 1e-10, f'idempotence error {error:.1e}'


def flow_check():
    x = np.array([1.0, -2.0])
    eps = np.array([0.5, 3.0])
    endpoints = max(np.abs(dll_head.noise_sample(x, eps, 0.0) - x).max(),
                    np.abs(dll_head.noise_sample(x, eps, 1.0) - eps).max())
    contracted = dll_head.euler_sample(lambda y, tau: y, np.ones(1), 10)[0]
    ok = endpoints == 0.0 and abs(contracted - 0.9 ** 10) < 1e-12
    return ok, f'Euler contraction {contracted:.4f}'


def gaussian_sampling_check():
    w2, lv = dll_head.wasserstein_stability_probe(3.0, 0.5, 0.0)
    return w2 < 0.02 and lv < 1e-10, f'exact-velocity W2 {w2:.4f}'


def metric_zero_check():
    rng = rng_streams.stream(0, 'selfcheck', 5)
    X = rng.standard_normal((16, 6))
    zeros = max(abs(metrics.energy_distance(X, X)), abs(metrics.sliced_wasserstein(X, X)))
    crps = metrics.crps(np.array([[0.0], [2.0]]), np.array([1.0]))
    spread = metrics.ssr(np.ones((8, 4)), np.zeros(4))
    ok = zeros < 1e-12 and abs(crps - 0.5) < 1e-12 and spread == 0.0
    return ok, f'self distances {zeros:.1e}, CRPS {crps:.3f}, SSR {spread:.1f}'


QUICK_CHECKS = [
    ('gradients', gradient_check),
    ('fft', fft_check),
    ('heat-propagator', heat_check),
    ('ks-mean', ks_mean_check),
    ('darcy-cg', darcy_cg_check),
    ('kl-optimality', kl_optimality_check),
    ('projection', projection_check),
    ('flow-oracles', flow_check),
    ('metric-zeros', metric_zero_check),
]

SLOW_CHECKS = [
    ('etdrk-order', etdrk_order_check),
    ('darcy-order', darcy_order_check),
    ('gaussian-sampling', gaussian_sampling_check),
]


def run_checks(quick=False):
    """Run every oracle and return the names of the failed ones"""
    checks = QUICK_CHECKS if quick else QUICK_CHECKS + SLOW_CHECKS
    print("=" * 60)
    print("🔧 Running self-checks...")
    print("=" * 60)

    failures = []
    for number, (name, check) in enumerate(checks, start=1):
        print(f"\n{number}. {name}...")
        try:
            ok, detail = check()
        except Exception as e:
            ok, detail = False, f'raised {type(e).__name__}: {e}'
        if ok:
            print(f"   ✅ {detail}")
        else:
            print(f"   ❌ {detail}")
            failures.append(name)

    print("\n" + "=" * 60)
    print(f"📊 {len(checks) - len(failures)}/{len(checks)} checks passed")
    print("=" * 60)
    return failures


if __name__ == '__main__':
    sys.exit(1 if run_checks(quick='--quick' in sys.argv) else 0)
