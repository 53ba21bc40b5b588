import numpy as np
import pytest
import torch

from cada.ardm import Ardm, ardm_transition
from cada.controller import (
    ControllerConfig,
    ControllerNet,
    WindowTensors,
    controlled_step,
    controlled_substep,
    controlled_transition,
    controls,
)
from cada.errors import InvalidInput, NumericalError
from cada.obs import PreviewWindow, preview_cost, regime_from_name, mask_cost
from cada.oracle import fd_gradient
from cada.schedule import NoiseSchedule
from cada.unet import UNet, UNetConfig

TINY_NET = UNetConfig(spatial_ndim=1, base_dim=8, dim_mults=(1, 2), sinusoidal_dim=16,
                      groups=4, attn_heads=2, attn_levels=1)
TINY_CTRL = ControllerConfig(spatial_ndim=1, hid=8, groups=4)


def make_ardm(seed=0, n_sub=3, mean=0.5, std=2.0, dtype=torch.float32):
    torch.manual_seed(seed)
    net = UNet(TINY_NET).to(dtype)
    return Ardm(net, NoiseSchedule(n_sub), mean, std).freeze()


def window(n=16, delta=3, horizon=8, step=1, anchor=0, seed=0, empty=False):
    rng = np.random.default_rng(seed)
    mask = np.zeros((1, n), np.float32)
    mask[0, ::2] = 1.0
    values = (mask * rng.standard_normal((1, n))).astype(np.float32)
    if empty:
        values, mask = np.zeros_like(values), np.zeros_like(mask)
        return PreviewWindow(values, mask, horizon, None, anchor, horizon, True, step)
    return PreviewWindow(values, mask, delta, step + delta, anchor, horizon, False, step)


def randomize(net, seed=1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 0.1)
    return net


def test_zero_init_head_outputs_exactly_zero_at_first_substep():
    torch.manual_seed(0)
    net = ControllerNet(TINY_CTRL)
    schedule = NoiseSchedule(3)
    z = torch.randn(2, 1, 16)
    u = controls(net, schedule, z, torch.randn_like(z), window(), 2,
                 torch.zeros_like(z))
    assert torch.equal(u, torch.zeros_like(z))


def test_zero_init_head_reduces_to_normalized_previous_control():
    torch.manual_seed(0)
    net = ControllerNet(TINY_CTRL)
    schedule = NoiseSchedule(3)
    z = torch.randn(2, 1, 16)
    u_prev = torch.randn_like(z)
    with torch.no_grad():
        u = controls(net, schedule, z, torch.randn_like(z), window(), 1, u_prev)
        np.testing.assert_allclose(u.numpy(), net.norm_prev(u_prev).numpy(), atol=1e-7)


def test_output_shape_matches_latent_1d_and_2d():
    torch.manual_seed(0)
    net1 = ControllerNet(ControllerConfig(spatial_ndim=1, hid=8, groups=4))
    z1 = torch.randn(2, 1, 64)
    u1 = net1(z1, torch.randn_like(z1), torch.randn_like(z1),
              torch.ones(2, 1, 64), torch.zeros_like(z1), 0.5, 0.25, 0.3)
    assert u1.shape == z1.shape
    net2 = ControllerNet(ControllerConfig(spatial_ndim=2, hid=8, groups=4))
    z2 = torch.randn(2, 1, 64, 64)
    u2 = net2(z2, torch.randn_like(z2), torch.randn_like(z2),
              torch.ones(2, 1, 64, 64), torch.zeros_like(z2), 0.5, 0.25, 0.3)
    assert u2.shape == z2.shape


def test_lead_time_conditioning_changes_output():
    torch.manual_seed(3)
    net = randomize(ControllerNet(TINY_CTRL))
    schedule = NoiseSchedule(3)
    z = torch.randn(1, 1, 16)
    x_prev = torch.randn_like(z)
    u_prev = torch.zeros_like(z)
    near = controls(net, schedule, z, x_prev, window(delta=1), 1, u_prev)
    far = controls(net, schedule, z, x_prev, window(delta=7), 1, u_prev)
    assert torch.linalg.vector_norm(near - far) > 0


def test_substep_gamma_zero_and_zero_control_match_unguided():
    schedule = NoiseSchedule(3)
    def denoiser(z, s, cond):
        return 0.3 * z - 0.1 * cond
    z = torch.randn(2, 1, 16, dtype=torch.float64)
    x = torch.randn_like(z)
    x0 = (schedule.mu[2] * z - schedule.sigma[2] * denoiser(z, 2, x))
    reference = schedule.ddim_substep(z, x0, 1)
    guided, _ = controlled_substep(schedule, denoiser, z, torch.randn_like(z), 0.0, x, 1)
    np.testing.assert_allclose(guided.numpy(), reference.numpy(), atol=1e-12)
    guided, _ = controlled_substep(schedule, denoiser, z, torch.zeros_like(z), 2.5, x, 1)
    np.testing.assert_allclose(guided.numpy(), reference.numpy(), atol=1e-12)


def test_substep_shift_is_affine_for_constant_estimate():
    # a denoiser pinning x0-hat to a constant makes the guided sub-step an
    # explicit affine map of the shifted latent
    schedule = NoiseSchedule(3)
    const = 0.7
    def denoiser(z, s, cond):
        return (schedule.mu[s] * z - const) / schedule.sigma[s]
    z = torch.randn(1, 1, 8, dtype=torch.float64)
    u = torch.randn_like(z)
    gamma = 1.3
    for s in (0, 1):
        got, _ = controlled_substep(schedule, denoiser, z, u, gamma, z, s)
        shifted = z + gamma * u
        expected = schedule.mu[s] * const + (schedule.sigma[s] / schedule.sigma[s + 1]) \
            * (shifted - schedule.mu[s + 1] * const)
        np.testing.assert_allclose(got.numpy(), expected.numpy(), atol=1e-12)


def test_substep_overflow_raises():
    # a saturating denoiser keeps v-hat finite while the shifted latent
    # overflows, so the failure surfaces in the sub-step output itself
    schedule = NoiseSchedule(3)
    def denoiser(z, s, cond):
        return torch.clamp(z, -1.0, 1.0)
    z = torch.ones(1, 1, 4, dtype=torch.float64)
    u = torch.full_like(z, float("inf"))
    with pytest.raises(NumericalError):
        controlled_substep(schedule, denoiser, z, u, 1.0, None, 1)


def test_gamma_zero_transition_is_bitwise_unguided():
    ardm = make_ardm()
    torch.manual_seed(5)
    net = randomize(ControllerNet(TINY_CTRL), seed=9)
    x = torch.randn(1, 1, 16) * 2.0 + 0.5
    got = controlled_transition(ardm, net, x, window(), torch.Generator().manual_seed(11),
                                gamma=0.0)
    ref = ardm.denormalize(ardm_transition(ardm.schedule, ardm.denoiser(),
                                           ardm.normalize(x),
                                           torch.Generator().manual_seed(11)))
    assert torch.equal(got.x_next, ref)
    assert got.controls == []


def test_zero_head_policy_is_bitwise_unguided_at_gamma_one():
    ardm = make_ardm()
    torch.manual_seed(6)
    net = ControllerNet(TINY_CTRL)  # zero-initialized residual head
    x = torch.randn(1, 1, 16)
    got = controlled_transition(ardm, net, x, window(), torch.Generator().manual_seed(2),
                                gamma=1.0)
    ref = ardm.denormalize(ardm_transition(ardm.schedule, ardm.denoiser(),
                                           ardm.normalize(x),
                                           torch.Generator().manual_seed(2)))
    assert torch.equal(got.x_next, ref)
    assert len(got.controls) == ardm.schedule.S


def test_step_loss_zero_off_arrival_and_recomputable_on_arrival():
    ardm = make_ardm()
    torch.manual_seed(7)
    net = randomize(ControllerNet(TINY_CTRL), seed=13)
    regime = regime_from_name("MS-2")
    cost_fn = preview_cost(regime, 1)
    x = torch.randn(1, 1, 16)

    off = window(delta=3)
    x_next, loss = controlled_step(ardm, net, x, off, torch.Generator().manual_seed(0),
                                   cost_fn=cost_fn)
    assert float(loss) == 0.0

    on = window(delta=1)
    x_next, loss = controlled_step(ardm, net, x, on, torch.Generator().manual_seed(0),
                                   cost_fn=cost_fn)
    expected = mask_cost(x_next.detach(), torch.as_tensor(on.values),
                         torch.as_tensor(on.mask))
    np.testing.assert_allclose(float(loss.detach()), float(expected), rtol=1e-6)

    empty = window(empty=True)
    _, loss = controlled_step(ardm, net, x, empty, torch.Generator().manual_seed(0),
                              cost_fn=cost_fn)
    assert float(loss) == 0.0


def test_transition_substep_previews_cover_all_levels():
    ardm = make_ardm(n_sub=3)
    res = controlled_transition(ardm, None, torch.randn(1, 1, 16), window(),
                                torch.Generator().manual_seed(0))
    assert len(res.x0_previews) == 3
    # the last preview is the final state itself: the clean-level sub-step
    # collapses onto the estimate
    np.testing.assert_allclose(res.x0_previews[-1].numpy(), res.x_next.numpy(),
                               rtol=0, atol=1e-5)


def grad_check_setup():
    # two explicit sub-steps with the prior latent pinned, so both the
    # reverse-mode pass and the finite-difference probe see the same
    # deterministic function of the policy parameters
    torch.manual_seed(0)
    ardm = make_ardm(n_sub=2, mean=0.0, std=1.0, dtype=torch.float64)
    ctrl = ControllerNet(ControllerConfig(spatial_ndim=1, hid=2, groups=1)).double()
    randomize(ctrl, seed=21)
    assert sum(p.numel() for p in ctrl.parameters()) <= 500

    schedule = ardm.schedule
    denoiser = ardm.denoiser()
    win = window(n=8, delta=1)
    gen = torch.Generator().manual_seed(3)
    x = torch.randn(1, 1, 8, generator=gen).double()
    z_prior = torch.randn(1, 1, 8, generator=gen).double()
    cost_fn = preview_cost(regime_from_name("MS-2"), 1)

    def first_control():
        return controls(ctrl, schedule, z_prior, x, win, 1, torch.zeros_like(z_prior))

    def loss_value(u_prev_frozen=None):
        u1 = first_control()
        z1, _ = controlled_substep(schedule, denoiser, z_prior, u1, 1.0, x, 1)
        # past controls are constants for the gradient; the frozen copy
        # realizes exactly the function the stop-gradient differentiates
        u_prev = u1 if u_prev_frozen is None else u_prev_frozen
        u2 = controls(ctrl, schedule, z1, x, win, 0, u_prev)
        z0, _ = controlled_substep(schedule, denoiser, z1, u2, 1.0, x, 0)
        return cost_fn(z0, win)

    return ardm, ctrl, loss_value, first_control


def test_policy_gradient_matches_finite_differences():
    _, ctrl, loss_value, first_control = grad_check_setup()
    params = list(ctrl.parameters())

    loss = loss_value()
    loss.backward()
    analytic = np.concatenate([p.grad.numpy().ravel() for p in params])
    with torch.no_grad():
        u1_frozen = first_control()

    sizes = [p.numel() for p in params]
    theta0 = np.concatenate([p.detach().numpy().ravel() for p in params])

    def set_params(vec):
        offset = 0
        with torch.no_grad():
            for p, n in zip(params, sizes):
                p.copy_(torch.from_numpy(vec[offset:offset + n].reshape(p.shape)))
                offset += n

    def objective(vec):
        set_params(vec)
        with torch.no_grad():
            return float(loss_value(u_prev_frozen=u1_frozen))

    numeric = fd_gradient(objective, theta0, h=1e-5)
    set_params(theta0)
    denom = max(np.linalg.norm(analytic), 1e-12)
    assert np.linalg.norm(analytic - numeric) / denom <= 1e-3


def test_no_gradient_reaches_frozen_backbone():
    ardm, ctrl, loss_value, _ = grad_check_setup()
    loss = loss_value()
    loss.backward()
    assert all(not p.requires_grad for p in ardm.net.parameters())
    assert all(p.grad is None for p in ardm.net.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in ctrl.parameters())


def test_u_prev_is_stop_gradient():
    torch.manual_seed(1)
    net = randomize(ControllerNet(TINY_CTRL), seed=17).double()
    schedule = NoiseSchedule(3)
    z = torch.randn(1, 1, 16, dtype=torch.float64)
    x_prev = torch.randn_like(z)
    win = window()

    u1 = controls(net, schedule, z, x_prev, win, 2, torch.zeros_like(z))
    u2 = controls(net, schedule, z, x_prev, win, 1, u1)
    grads = torch.autograd.grad(u2.sum(), net.parameters(), allow_unused=True)

    u1_cut = u1.detach().clone()
    u2_cut = controls(net, schedule, z, x_prev, win, 1, u1_cut)
    grads_cut = torch.autograd.grad(u2_cut.sum(), net.parameters(), allow_unused=True)

    for a, b in zip(grads, grads_cut):
        if a is None or b is None:
            assert a is None and b is None
        else:
            assert torch.equal(a, b)


def test_input_validation():
    net = ControllerNet(TINY_CTRL)
    z = torch.randn(1, 1, 16)
    good = dict(x_prev=torch.randn_like(z), y=torch.randn_like(z),
                mask=torch.ones(1, 1, 16), u_prev=torch.zeros_like(z))
    with pytest.raises(InvalidInput):
        net(z, torch.randn(1, 2, 16), good["y"], good["mask"], good["u_prev"], 0.5, 0.5, 0.5)
    with pytest.raises(InvalidInput):
        net(z, good["x_prev"], good["y"], torch.ones(1, 1, 8), good["u_prev"], 0.5, 0.5, 0.5)
    with pytest.raises(InvalidInput):
        ControllerConfig(spatial_ndim=3)


def test_window_tensors_batching_rules():
    w1 = window(delta=2, step=1, anchor=0)
    w2 = window(delta=5, step=1, anchor=0, seed=4)
    batch = WindowTensors.from_previews([w1, w2])
    assert batch.values.shape == (2, 1, 16)
    assert batch.delta.tolist() == [2.0, 5.0]
    assert batch.arrival.tolist() == [False, False]
    mismatched = window(delta=2, step=3, anchor=0)
    with pytest.raises(InvalidInput):
        WindowTensors.from_previews([w1, mismatched])
    ardm = make_ardm()
    with pytest.raises(InvalidInput):
        controlled_transition(ardm, randomize(ControllerNet(TINY_CTRL)),
                              torch.randn(3, 1, 16), batch,
                              torch.Generator().manual_seed(0))
