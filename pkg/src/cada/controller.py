"""Preview-conditioned control policy and the guided DDIM transition.

The policy reads the current latent, the previous physical state, the
active preview observation, and the control emitted one sub-step earlier,
all stacked along channels, and outputs an additive shift for the latent.
Three scalar conditioners (lead time, local frame index, noise level)
modulate the encoded features FiLM-style.  A zero-initialized residual
head makes an untrained policy reproduce the unguided sampler exactly.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import io
from .ardm import tweedie_estimate
from .errors import InvalidInput, NumericalError
from .obs import PreviewWindow
from .unet import conv_nd


def _norm_groups(preferred, channels):
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


@dataclass(frozen=True)
class ControllerConfig:
    spatial_ndim: int = 1
    channels: int = 1       # state/latent channels; the mask adds one plane
    hid: int = 128
    groups: int = 8

    def __post_init__(self):
        if self.spatial_ndim not in (1, 2):
            raise InvalidInput(f"unsupported spatial rank {self.spatial_ndim}")
        if self.hid % _norm_groups(self.groups, self.hid):
            raise InvalidInput("hid must be divisible by the group-norm group count")


class _ScalarEmbed(nn.Module):
    """Two-layer MLP lifting one scalar conditioner into the hidden width."""

    def __init__(self, hid):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(1, hid), nn.SiLU(), nn.Linear(hid, hid))

    def forward(self, value):
        return self.net(value[:, None])


class ControllerNet(nn.Module):
    """u = GroupNorm(u_prev) + residual(features(inputs))."""

    def __init__(self, config=ControllerConfig()):
        super().__init__()
        self.config = config
        conv = conv_nd(config.spatial_ndim)
        c, hid = config.channels, config.hid
        g = _norm_groups(config.groups, hid)
        in_ch = 4 * c + 1  # z, x_prev, y*, u_prev stacks plus the mask plane

        self.enc1 = conv(in_ch, hid, 3, padding=1)
        self.gn1 = nn.GroupNorm(g, hid)
        self.enc2 = conv(hid, hid, 3, padding=1)
        self.gn2 = nn.GroupNorm(g, hid)
        # half-resolution context branch, fused back at full resolution
        self.down = conv(hid, hid, 3, stride=2, padding=1)
        self.gn_down = nn.GroupNorm(g, hid)
        self.fuse = conv(2 * hid, hid, 1)
        self.gn_fuse = nn.GroupNorm(g, hid)

        self.embed_lead = _ScalarEmbed(hid)
        self.embed_frame = _ScalarEmbed(hid)
        self.embed_snr = _ScalarEmbed(hid)
        self.film = nn.Linear(3 * hid, 2 * hid)

        self.head = conv(hid, c, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.norm_prev = nn.GroupNorm(_norm_groups(config.groups, c), c, affine=False)

        self.act = nn.SiLU()

    def _check(self, z, x_prev, y, mask, u_prev):
        c, nd = self.config.channels, self.config.spatial_ndim
        for name, tensor, ch in (("z", z, c), ("x_prev", x_prev, c), ("y", y, c),
                                 ("mask", mask, 1), ("u_prev", u_prev, c)):
            if tensor.ndim != nd + 2 or tensor.shape[1] != ch:
                raise InvalidInput(
                    f"{name} must be (B, {ch}, *spatial) with {nd} spatial dims, "
                    f"got {tuple(tensor.shape)}")
            if tensor.shape[0] != z.shape[0] or tensor.shape[2:] != z.shape[2:]:
                raise InvalidInput(f"{name} shape {tuple(tensor.shape)} does not "
                                   f"match latent {tuple(z.shape)}")

    def forward(self, z, x_prev, y, mask, u_prev, lead, frame, snr):
        self._check(z, x_prev, y, mask, u_prev)
        # controls never backpropagate into their own past outputs
        u_prev = u_prev.detach()

        def scalar(v):
            v = torch.as_tensor(v, dtype=z.dtype, device=z.device)
            return v.expand(z.shape[0]) if v.ndim == 0 else v

        h = torch.cat([z, x_prev, y, mask, u_prev], dim=1)
        h = self.act(self.gn1(self.enc1(h)))
        h = self.act(self.gn2(self.enc2(h)))
        coarse = self.act(self.gn_down(self.down(h)))
        coarse = nn.functional.interpolate(coarse, size=h.shape[2:], mode="nearest")
        h = self.gn_fuse(self.fuse(torch.cat([h, coarse], dim=1)))

        emb = torch.cat([self.embed_lead(scalar(lead)), self.embed_frame(scalar(frame)),
                         self.embed_snr(scalar(snr))], dim=-1)
        gamma_f, beta_f = self.film(emb).chunk(2, dim=-1)
        spatial_ones = (1,) * self.config.spatial_ndim
        h = h * (1.0 + gamma_f.view(*gamma_f.shape, *spatial_ones)) \
            + beta_f.view(*beta_f.shape, *spatial_ones)
        h = self.act(h)
        return self.norm_prev(u_prev) + self.head(h)


@dataclass
class WindowTensors:
    """A batch of active previews, one per rollout, advanced in lockstep.

    ``values`` carries raw (physical-unit) observations; standardization
    happens at the point of use.  ``delta`` equal to the horizon encodes
    an empty window, matching the selector's sentinel.
    """

    values: torch.Tensor    # (B, C, *spatial)
    mask: torch.Tensor      # (B, 1, *spatial)
    delta: torch.Tensor     # (B,) lead times
    frame: int              # t - t0, shared across the batch
    horizon: int

    @property
    def arrival(self):
        """Per-element flag: the next step lands exactly on an arrival."""
        return self.delta == 1

    @staticmethod
    def from_previews(previews, dtype=torch.float32):
        frames = {p.step - p.anchor for p in previews}
        horizons = {p.horizon for p in previews}
        if len(frames) != 1 or len(horizons) != 1:
            raise InvalidInput("batched previews must share frame index and horizon")
        return WindowTensors(
            values=torch.stack([torch.as_tensor(np.asarray(p.values), dtype=dtype)
                                for p in previews]),
            mask=torch.stack([torch.as_tensor(np.asarray(p.mask), dtype=dtype)
                              for p in previews]),
            delta=torch.tensor([p.delta for p in previews], dtype=dtype),
            frame=frames.pop(), horizon=horizons.pop(),
        )


def _as_window(window, batch, dtype):
    if isinstance(window, PreviewWindow):
        window = WindowTensors.from_previews([window] * batch, dtype=dtype)
    if window.values.shape[0] != batch:
        raise InvalidInput(f"window batch {window.values.shape[0]} does not match "
                           f"state batch {batch}")
    return window


def controls(net, schedule, z, x_prev, window, s, u_prev, mean=0.0, std=1.0):
    """Control for one sub-step.

    ``z`` and ``x_prev`` are model-space tensors; the window holds raw
    stream data and is standardized here (observed entries only, so empty
    previews stay exactly zero).  Scalar conditioners are the lead and
    frame index normalized by the horizon, and the noise level of the
    target sub-step mapped to [0, 1].
    """
    window = _as_window(window, z.shape[0], z.dtype)
    y = (window.values.to(z.dtype) - mean * window.mask.to(z.dtype)) / std
    lead = window.delta.to(z.dtype) / window.horizon
    frame = window.frame / window.horizon
    return net(z, x_prev, y, window.mask.to(z.dtype), u_prev, lead, frame,
               schedule.normalized_logsnr(s))


def controlled_substep(schedule, denoiser, z_parent, u, gamma, x_cond, s):
    """One guided DDIM sub-step: shift the parent latent, then denoise.

    The shift is skipped entirely when it cannot change the latent, which
    keeps the unguided arithmetic bit-identical at gamma = 0.
    """
    if u is not None and gamma != 0.0:
        z_parent = z_parent + gamma * u
    x0 = tweedie_estimate(schedule, denoiser, z_parent, s + 1, x_cond)
    z = schedule.ddim_substep(z_parent, x0, s)
    if not torch.isfinite(z).all():
        raise NumericalError(f"guided sub-step produced non-finite latent at level {s}")
    return z, x0


@dataclass
class TransitionResult:
    """One guided transition: the new state plus per-sub-step previews."""

    x_next: torch.Tensor    # physical units
    x0_previews: list       # physical-unit Tweedie estimates, one per sub-step
    controls: list          # emitted controls, model units (empty when unguided)


def controlled_transition(ardm, net, x_t, window, generator, gamma=1.0):
    """Guided counterpart of one autoregressive transition.

    ``x_t`` is in physical units; ``window`` is a PreviewWindow (shared by
    the whole batch) or WindowTensors.  Each sub-step first asks the policy
    for a control (the first sub-step sees u_prev = 0), shifts the parent
    latent by gamma times the control, then applies the unguided DDIM
    sub-step.  With gamma = 0 or no policy the loop reproduces the
    pretrained sampler's arithmetic exactly.
    """
    schedule = ardm.schedule
    denoiser = ardm.denoiser()
    x_cond = ardm.normalize(x_t)
    z = torch.empty_like(x_cond).normal_(generator=generator)
    guided = net is not None and gamma != 0.0
    if guided:
        window = _as_window(window, x_cond.shape[0], x_cond.dtype)
    u_prev = torch.zeros_like(z)
    x0_previews = []
    emitted = []
    for s in reversed(range(schedule.S)):
        u = None
        if guided:
            u = controls(net, schedule, z, x_cond, window, s, u_prev,
                         ardm.data_mean, ardm.data_std)
            emitted.append(u)
            u_prev = u
        z, x0 = controlled_substep(schedule, denoiser, z, u, gamma, x_cond, s)
        x0_previews.append(ardm.denormalize(x0))
    return TransitionResult(x_next=ardm.denormalize(z), x0_previews=x0_previews,
                            controls=emitted)


def controlled_step(ardm, net, x_t, preview, generator, gamma=1.0, cost_fn=None):
    """Advance one step and score the result if it lands on an arrival.

    Returns (x_{t+1}, loss); the loss is the arrival cost when t+1 is an
    observation time (the selector guarantees the active preview is then
    exactly one step ahead) and zero otherwise.
    """
    result = controlled_transition(ardm, net, x_t, preview, generator, gamma)
    if cost_fn is not None and not preview.empty and preview.delta == 1:
        loss = cost_fn(result.x_next, preview)
    else:
        loss = torch.zeros((), dtype=result.x_next.dtype)
    return result.x_next, loss


def save_controller_checkpoint(path, net, *, gamma, horizon, regime, ardm_hash,
                               ardm_hash_kind="params", train_config=None,
                               step=None, started=None):
    """Persist the policy weights with everything needed to re-pair them.

    The stored ARDM hash links the policy to the exact backbone it was
    trained against; loading code compares it before sampling so a policy
    is never silently run on a different backbone.
    """
    if not isinstance(getattr(net, "config", None), ControllerConfig):
        raise InvalidInput("only ControllerNet policies can be checkpointed")
    state = net.state_dict()
    arrays = io.state_dict_arrays(state, "psi")
    meta = {
        "kind": "controller_checkpoint",
        "controller_config": asdict(net.config),
        "gamma": float(gamma),
        "horizon": int(horizon),
        "regime_kind": regime.kind,
        "regime_factor": int(regime.factor),
        "regime_every": int(regime.every),
        "regime_phase": int(regime.phase),
        "ardm_hash": ardm_hash,
        "ardm_hash_kind": ardm_hash_kind,
        "psi_hash": io.params_hash(state),
    }
    if train_config is not None:
        meta["train_config"] = asdict(train_config)
    if step is not None:
        meta["step"] = int(step)
    if started is not None:
        meta["started_at"] = started
    return io.save_container(path, arrays, meta)


def load_controller_checkpoint(path):
    """Rebuild the policy from a checkpoint; returns (net, meta).

    The caller owns the backbone-hash comparison: meta["ardm_hash"] names
    the backbone the policy was trained with.
    """
    arrays, meta = io.load_container(path)
    if meta.get("kind") != "controller_checkpoint":
        raise InvalidInput(f"{path}: not a controller checkpoint")
    net = ControllerNet(ControllerConfig(**meta["controller_config"]))
    net.load_state_dict(io.arrays_state_dict(arrays, "psi"))
    net.eval()
    return net, meta
