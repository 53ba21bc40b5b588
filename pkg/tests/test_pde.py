import math

import numpy as np
import pytest

from cada.errors import InvalidInput, SimulationDiverged
from cada.pde import (
    KolmogorovConfig,
    KolmogorovSolver,
    KSConfig,
    KSSolver,
    generate_dataset,
    make_solver,
    random_initial_field,
)

from oracles import ks_rk4_truth, taylor_green_vorticity

N_KS = 64
L_KS = 16.0 * math.pi


def settled_ks_state(seed=42, frames=200):
    rng = np.random.default_rng(seed)
    solver = KSSolver(KSConfig(n=N_KS, length=L_KS))
    u = random_initial_field((N_KS,), rng)
    for _ in range(frames):
        u = solver.step(u)
    return u


def test_ks_one_step_error_shrinks_at_fourth_order():
    # Halving the step must cut the one-step error by at least 8x against
    # an independent RK4 truth (observed ratios sit near 20-30x).
    u = settled_ks_state()
    errs = []
    for h in (0.1, 0.05, 0.025):
        truth = ks_rk4_truth(u, h, 400, N_KS, L_KS)
        got = KSSolver(KSConfig(n=N_KS, length=L_KS, dt=h, substeps=1)).step(u)
        errs.append(np.max(np.abs(got - truth)))
    assert errs[0] > 1e-9  # sanity: above roundoff, the ratio is meaningful
    assert errs[1] <= errs[0] / 8.0
    assert errs[2] <= errs[1] / 8.0


def test_ks_substeps_refine_the_frame():
    u = settled_ks_state()
    truth = ks_rk4_truth(u, 0.2, 800, N_KS, L_KS)
    coarse = KSSolver(KSConfig(n=N_KS, length=L_KS, dt=0.2, substeps=1)).step(u)
    fine = KSSolver(KSConfig(n=N_KS, length=L_KS, dt=0.2, substeps=4)).step(u)
    assert np.max(np.abs(fine - truth)) < np.max(np.abs(coarse - truth))


def test_ks_mean_conserved_over_100_frames():
    u = settled_ks_state()
    u = u - u.mean()
    traj = KSSolver(KSConfig(n=N_KS, length=L_KS)).trajectory(u, 101)
    drift = np.max(np.abs(traj.mean(axis=1)))
    assert drift <= 1e-8


def test_ks_chaotic_not_stationary():
    u = settled_ks_state()
    solver = KSSolver(KSConfig(n=N_KS, length=L_KS))
    traj = solver.trajectory(u, 51)
    assert np.max(np.abs(traj[-1] - traj[0])) > 0.5
    assert np.max(np.abs(traj)) < 10.0


def test_ks_rejects_bad_input():
    solver = KSSolver(KSConfig(n=32, length=L_KS))
    with pytest.raises(InvalidInput):
        solver.step(np.zeros(31))
    with pytest.raises(InvalidInput):
        KSSolver(KSConfig(n=7))
    with pytest.raises(InvalidInput):
        KSSolver(KSConfig(dt=-0.1))
    with pytest.raises(InvalidInput):
        solver.trajectory(np.zeros(32), 0)


def test_divergence_reported_with_step_and_magnitude():
    solver = KSSolver(KSConfig(n=32, length=L_KS, blowup_threshold=1e-3))
    u = random_initial_field((32,), np.random.default_rng(0))
    with pytest.raises(SimulationDiverged) as info:
        solver.trajectory(u, 5)
    assert info.value.step == 0
    assert info.value.max_abs > 1e-3


def test_taylor_green_decays_at_exact_viscous_rate():
    # With forcing off the vortex lattice is an exact solution; advection
    # cancels identically, so solver error is pure roundoff.
    nu = 0.025
    cfg = KolmogorovConfig(n=64, nu=nu, forcing_amplitude=0.0)
    solver = KolmogorovSolver(cfg)
    w = taylor_green_vorticity(64, 0.0, nu)
    worst = 0.0
    for step in range(1, 51):
        w = solver.step(w)
        exact = taylor_green_vorticity(64, step * cfg.dt, nu)
        worst = max(worst, float(np.max(np.abs(w - exact))))
    assert worst <= 1e-10


def test_velocity_matches_analytic_streamfunction():
    # omega = 2 sin x sin y comes from psi = sin x sin y, so
    # u = sin x cos y and v = -cos x sin y.
    solver = KolmogorovSolver(KolmogorovConfig(n=64))
    x = 2 * np.pi * np.arange(64) / 64
    grid_x, grid_y = np.meshgrid(x, x, indexing="ij")
    u, v = solver.velocity(2.0 * np.sin(grid_x) * np.sin(grid_y))
    np.testing.assert_allclose(u, np.sin(grid_x) * np.cos(grid_y), rtol=0, atol=1e-12)
    np.testing.assert_allclose(v, -np.cos(grid_x) * np.sin(grid_y), rtol=0, atol=1e-12)


def test_velocity_is_divergence_free():
    solver = KolmogorovSolver(KolmogorovConfig(n=32))
    w = random_initial_field((32, 32), np.random.default_rng(5))
    u, v = solver.velocity(w)
    j = np.fft.fftfreq(32, d=1.0 / 32)
    div_hat = 1j * j[:, None] * np.fft.fft2(u) + 1j * j[None, :] * np.fft.fft2(v)
    assert np.max(np.abs(div_hat)) < 1e-10


def test_kolmogorov_forced_run_stays_bounded_with_zero_mean():
    solver = KolmogorovSolver(KolmogorovConfig(n=32, substeps=4))
    w = random_initial_field((32, 32), np.random.default_rng(7))
    for _ in range(50):
        w = solver.step(w)
    assert abs(w.mean()) < 1e-12
    assert np.max(np.abs(w)) < 50.0


def test_random_initial_field_is_band_limited_unit_rms():
    rng = np.random.default_rng(11)
    f = random_initial_field((64,), rng)
    assert abs(f.mean()) < 1e-12
    assert abs(math.sqrt(np.mean(f ** 2)) - 1.0) < 1e-9
    spec = np.abs(np.fft.rfft(f))
    assert np.all(spec[17:] < 1e-10 * spec.max())  # nothing above n/4 = 16
    f2 = random_initial_field((32, 32), rng)
    assert abs(f2.mean()) < 1e-12
    spec2 = np.abs(np.fft.fft2(f2))
    j = np.fft.fftfreq(32, d=1.0 / 32)
    mag = np.sqrt(j[:, None] ** 2 + j[None, :] ** 2)
    assert np.all(spec2[mag > 8.0] < 1e-10 * spec2.max())


def test_generate_dataset_shape_dtype_determinism():
    cfg = KSConfig(n=32, length=L_KS)
    a = generate_dataset(cfg, n_traj=3, n_frames=4, seed=9, burn_in=3)
    b = generate_dataset(cfg, n_traj=3, n_frames=4, seed=9, burn_in=3)
    assert a.shape == (3, 4, 1, 32)
    assert a.dtype == np.float32
    assert np.array_equal(a, b)
    c = generate_dataset(cfg, n_traj=3, n_frames=4, seed=10, burn_in=3)
    assert not np.array_equal(a, c)


def test_generate_dataset_trajectory_streams_are_independent_of_count():
    cfg = KSConfig(n=32, length=L_KS)
    two = generate_dataset(cfg, n_traj=2, n_frames=3, seed=21, burn_in=2)
    three = generate_dataset(cfg, n_traj=3, n_frames=3, seed=21, burn_in=2)
    assert np.array_equal(two, three[:2])


def test_generate_dataset_gives_up_after_retries():
    cfg = KSConfig(n=32, length=L_KS, blowup_threshold=1e-6)
    with pytest.raises(SimulationDiverged):
        generate_dataset(cfg, n_traj=1, n_frames=2, seed=0, burn_in=1, max_retries=2)


def test_make_solver_dispatch():
    assert isinstance(make_solver(KSConfig()), KSSolver)
    assert isinstance(make_solver(KolmogorovConfig()), KolmogorovSolver)
    with pytest.raises(InvalidInput):
        make_solver(object())
