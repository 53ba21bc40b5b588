import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cada.errors import InvalidInput
from cada.schedule import NoiseSchedule

# Closed-form table for S=3 (logSNR linear from +9 to -9), with the clean
# endpoint pinned exactly.
MU_S3 = [1.0, 0.9759990404, 0.2177748222, 0.0111083111]
SIGMA_S3 = [0.0, 0.2177748222, 0.9759990404, 0.9999383008]


def test_table_matches_closed_form():
    sched = NoiseSchedule(3)
    np.testing.assert_allclose(sched.mu, MU_S3, rtol=0, atol=1e-9)
    np.testing.assert_allclose(sched.sigma, SIGMA_S3, rtol=0, atol=1e-9)


def test_clean_endpoint_exact():
    sched = NoiseSchedule(5)
    assert sched.mu[0] == 1.0
    assert sched.sigma[0] == 0.0


@given(st.integers(min_value=1, max_value=64))
def test_variance_preserving(num_substeps):
    sched = NoiseSchedule(num_substeps)
    np.testing.assert_allclose(sched.mu ** 2 + sched.sigma ** 2, 1.0, rtol=0, atol=1e-12)
    assert np.all(np.diff(sched.mu) < 0)
    assert np.all(np.diff(sched.sigma) > 0)


def test_logsnr_is_linear():
    sched = NoiseSchedule(6)
    diffs = np.diff(sched.logsnr)
    np.testing.assert_allclose(diffs, diffs[0], rtol=0, atol=1e-12)
    assert sched.logsnr[0] == 9.0
    assert sched.logsnr[-1] == -9.0


def test_tail_is_near_pure_noise():
    sched = NoiseSchedule(3)
    assert 1.0 - sched.sigma[-1] <= 1e-3
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 1, 16))
    eps = rng.standard_normal((4, 1, 16))
    z = sched.noise_state(x0, eps, sched.S)
    bound = 0.0112 * np.abs(x0).max() + 6.2e-5 * np.abs(eps).max()
    assert np.abs(z - eps).max() <= bound


@given(
    num_substeps=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=2 ** 16),
)
@settings(max_examples=40, deadline=None)
def test_v_roundtrip_recovers_clean_and_noise(num_substeps, seed):
    sched = NoiseSchedule(num_substeps)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 1, 8))
    eps = rng.standard_normal((2, 1, 8))
    for s in range(num_substeps + 1):
        z = sched.noise_state(x0, eps, s)
        v = sched.v_from(x0, eps, s)
        np.testing.assert_allclose(sched.x0_from_v(z, v, s), x0, rtol=0, atol=1e-10)
        np.testing.assert_allclose(sched.eps_from_v(z, v, s), eps, rtol=0, atol=1e-10)


@given(
    num_substeps=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=2 ** 16),
)
@settings(max_examples=40, deadline=None)
def test_ddim_substep_is_consistent_with_forward_marginals(num_substeps, seed):
    # With the exact clean state and a shared noise draw, stepping down one
    # level must land exactly on the lower forward marginal.
    sched = NoiseSchedule(num_substeps)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 1, 8))
    eps = rng.standard_normal((3, 1, 8))
    for s in range(num_substeps):
        z_next = sched.noise_state(x0, eps, s + 1)
        z = sched.ddim_substep(z_next, x0, s)
        np.testing.assert_allclose(z, sched.noise_state(x0, eps, s), rtol=0, atol=1e-10)


def test_ddim_substep_collapses_to_estimate_at_clean_level():
    sched = NoiseSchedule(3)
    rng = np.random.default_rng(1)
    z1 = rng.standard_normal((2, 1, 8))
    x0_hat = rng.standard_normal((2, 1, 8))
    out = sched.ddim_substep(z1, x0_hat, 0)
    assert np.array_equal(out, x0_hat)


def test_torch_matches_numpy():
    sched = NoiseSchedule(3)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((2, 1, 8))
    eps = rng.standard_normal((2, 1, 8))
    for s in range(1, 4):
        z_np = sched.noise_state(x0, eps, s)
        z_t = sched.noise_state(torch.from_numpy(x0), torch.from_numpy(eps), s)
        np.testing.assert_allclose(z_t.numpy(), z_np, rtol=0, atol=1e-12)


def test_per_element_substep_indices():
    sched = NoiseSchedule(4)
    rng = np.random.default_rng(3)
    x0 = torch.from_numpy(rng.standard_normal((3, 1, 8)))
    eps = torch.from_numpy(rng.standard_normal((3, 1, 8)))
    s = torch.tensor([1, 2, 4])
    batched = sched.noise_state(x0, eps, s)
    for i, si in enumerate([1, 2, 4]):
        np.testing.assert_allclose(
            batched[i].numpy(),
            sched.noise_state(x0[i:i + 1], eps[i:i + 1], si)[0].numpy(),
            rtol=0, atol=1e-12,
        )
    # batched ddim: mixed target levels
    z_next = sched.noise_state(x0, eps, torch.tensor([2, 3, 4]))
    stepped = sched.ddim_substep(z_next, x0, torch.tensor([1, 2, 3]))
    np.testing.assert_allclose(
        stepped.numpy(),
        sched.noise_state(x0, eps, torch.tensor([1, 2, 3])).numpy(),
        rtol=0, atol=1e-10,
    )


def test_rejects_bad_construction():
    with pytest.raises(InvalidInput):
        NoiseSchedule(0)
    with pytest.raises(InvalidInput):
        NoiseSchedule(3, logsnr_hi=-9.0, logsnr_lo=9.0)
    with pytest.raises(InvalidInput):
        NoiseSchedule(3, logsnr_hi=float("nan"))


def test_rejects_out_of_range_substep():
    sched = NoiseSchedule(3)
    x = np.zeros((1, 1, 4))
    with pytest.raises(InvalidInput):
        sched.noise_state(x, x, 4)
    with pytest.raises(InvalidInput):
        sched.noise_state(x, x, -1)
    with pytest.raises(InvalidInput):
        sched.ddim_substep(x, x, 3)


def test_rejects_substep_from_zero_noise_level():
    # Extreme endpoints saturate the sigmoid, collapsing sigma to zero;
    # the deterministic substep is undefined from such a level.
    sched = NoiseSchedule(2, logsnr_hi=160.0, logsnr_lo=80.0)
    assert sched.sigma[1] == 0.0
    x = np.zeros((1, 1, 4))
    with pytest.raises(InvalidInput):
        sched.ddim_substep(x, x, 0)


def test_normalized_logsnr_endpoints():
    sched = NoiseSchedule(3)
    assert sched.normalized_logsnr(0) == 1.0
    assert sched.normalized_logsnr(3) == 0.0
    assert 0.0 < sched.normalized_logsnr(2) < sched.normalized_logsnr(1) < 1.0
