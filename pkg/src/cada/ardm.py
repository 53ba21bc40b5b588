"""Autoregressive diffusion dynamics: one temporal transition per S-step
conditional DDIM sampling pass.

The denoiser is any callable (z, s, cond) -> v_hat; the trained U-Net is
the production choice, and analytic surrogates plug in for verification.
All model-space operations assume normalized fields; the checkpoint
carries the training-split mean/std so callers can convert at the
boundary.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import io
from .errors import InvalidInput, NumericalError
from .schedule import NoiseSchedule
from .unet import Ema, UNet, UNetConfig


def tweedie_estimate(schedule, denoiser, z, s, cond):
    """Posterior-mean estimate of the clean state from one denoiser call."""
    v_hat = denoiser(z, s, cond)
    if not torch.all(torch.isfinite(v_hat)):
        raise NumericalError("denoiser produced non-finite output")
    return schedule.x0_from_v(z, v_hat, s)


def ardm_transition(schedule, denoiser, x_t, generator):
    """One temporal step x_t -> x_{t+1}: draw the prior latent and run the
    S conditioned DDIM sub-steps down to the clean level."""
    z = torch.empty_like(x_t).normal_(generator=generator)
    for s in reversed(range(schedule.S)):
        x0_hat = tweedie_estimate(schedule, denoiser, z, s + 1, x_t)
        z = schedule.ddim_substep(z, x0_hat, s)
        if not torch.all(torch.isfinite(z)):
            raise NumericalError(f"non-finite latent at sub-step {s}")
    return z


def rollout_unguided(schedule, denoiser, x_init, n_steps, generator):
    """Autoregressive rollout; returns the n_steps states after x_init,
    stacked on a new leading axis."""
    if n_steps < 1:
        raise InvalidInput(f"n_steps must be >= 1, got {n_steps}")
    states = []
    x = x_init
    with torch.no_grad():
        for _ in range(n_steps):
            x = ardm_transition(schedule, denoiser, x, generator)
            states.append(x)
    return torch.stack(states)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 20_000
    batch_size: int = 32
    lr: float = 3.2e-4
    ema_decay: float = 0.995
    ema_every: int = 10
    num_substeps: int = 3
    seed: int = 0
    log_every: int = 100
    holdout_fraction: float = 0.05
    cosine_lr: bool = False


class Ardm:
    """Frozen dynamics bundle: schedule + denoiser net + field statistics."""

    def __init__(self, net, schedule, data_mean, data_std):
        self.net = net
        self.schedule = schedule
        self.data_mean = float(data_mean)
        self.data_std = float(data_std)

    def normalize(self, x):
        return (x - self.data_mean) / self.data_std

    def denormalize(self, x):
        return x * self.data_std + self.data_mean

    def denoiser(self):
        net = self.net
        def call(z, s, cond):
            return net(z, s, cond)
        return call

    def transition(self, x_t, generator):
        return ardm_transition(self.schedule, self.denoiser(), x_t, generator)

    def rollout(self, x_init, n_steps, generator):
        return rollout_unguided(self.schedule, self.denoiser(), x_init, n_steps, generator)

    def freeze(self):
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        return self

    def params_hash(self):
        return io.params_hash(self.net.state_dict())


def _dataset_pairs(data):
    """View an (n_traj, n_frames, C, *spatial) array as transition pairs."""
    data = np.asarray(data)
    if data.ndim < 4 or data.shape[1] < 2:
        raise InvalidInput(f"dataset must be (traj, frames>=2, C, *spatial), got {data.shape}")
    return data


def pretrain_ardm(data, unet_config, config=PretrainConfig(), checkpoint_path=None,
                  log_path=None):
    """Train the v-prediction backbone on consecutive state pairs.

    Each update noises x_{t+1} at a uniformly drawn sub-step, conditions on
    x_t by channel concatenation, and regresses the velocity target.  An
    EMA shadow tracks the weights; sampling is meant to use the shadow.
    Returns (ardm, ema, history); `ardm.net` holds the raw trained weights.
    """
    data = _dataset_pairs(data)
    n_traj, n_frames = data.shape[:2]
    mean = float(data.mean())
    std = float(data.std())
    if std == 0.0:
        raise InvalidInput("degenerate dataset: zero variance")

    schedule = NoiseSchedule(config.num_substeps)
    torch.manual_seed(config.seed)
    net = UNet(unet_config)
    ema = Ema(net, decay=config.ema_decay, every=config.ema_every)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    lr_sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.steps)
                if config.cosine_lr else None)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    # held-out trajectories for the sanity comparison in the history
    n_hold = min(int(n_traj * config.holdout_fraction), n_traj - 1)
    train = data[: n_traj - n_hold] if n_hold > 0 else data
    hold = data[n_traj - n_hold:] if n_hold > 0 else data

    def sample_batch(source, batch_rng):
        ti = batch_rng.integers(0, source.shape[0], size=config.batch_size)
        fi = batch_rng.integers(0, source.shape[1] - 1, size=config.batch_size)
        x_prev = torch.from_numpy((source[ti, fi].astype(np.float32) - mean) / std)
        x_next = torch.from_numpy((source[ti, fi + 1].astype(np.float32) - mean) / std)
        return x_prev, x_next

    def v_loss(x_prev, x_next):
        s = torch.randint(1, schedule.S + 1, (x_next.shape[0],), generator=gen)
        eps = torch.empty_like(x_next).normal_(generator=gen)
        z = schedule.noise_state(x_next, eps, s)
        target = schedule.v_from(x_next, eps, s)
        return torch.mean((net(z, s, x_prev) - target) ** 2)

    history = []
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    log_lines = []
    t_start = time.time()
    for step in range(1, config.steps + 1):
        opt.zero_grad(set_to_none=True)
        loss = v_loss(*sample_batch(train, rng))
        if not torch.isfinite(loss):
            raise NumericalError(f"pretraining loss became non-finite at step {step}")
        loss.backward()
        opt.step()
        if lr_sched is not None:
            lr_sched.step()
        ema.maybe_update(net, step)
        if step % config.log_every == 0 or step == 1 or step == config.steps:
            with torch.no_grad():
                hold_loss = float(v_loss(*sample_batch(hold, np.random.default_rng(0))))
            record = {"step": step, "loss": loss.item(), "holdout_loss": hold_loss,
                      "wall_time_s": round(time.time() - t_start, 2)}
            history.append(record)
            log_lines.append(json.dumps(record))

    ardm = Ardm(net, schedule, mean, std)
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    if checkpoint_path is not None:
        save_ardm_checkpoint(checkpoint_path, ardm, ema, unet_config, config, started)
    return ardm, ema, history


def save_ardm_checkpoint(path, ardm, ema, unet_config, pretrain_config=None, started=None):
    arrays = {}
    arrays.update(io.state_dict_arrays(ardm.net.state_dict(), "theta"))
    arrays.update(io.state_dict_arrays(ema.state_dict(), "ema"))
    arrays["schedule/mu"] = ardm.schedule.mu
    arrays["schedule/sigma"] = ardm.schedule.sigma
    arrays["norm/mean_std"] = np.array([ardm.data_mean, ardm.data_std])
    meta = {
        "kind": "ardm_checkpoint",
        "unet_config": asdict(unet_config),
        "num_substeps": ardm.schedule.S,
        "logsnr_hi": ardm.schedule.logsnr_hi,
        "logsnr_lo": ardm.schedule.logsnr_lo,
        "ema_decay": ema.decay,
        "ema_every": ema.every,
        "theta_hash": io.params_hash(ardm.net.state_dict()),
        "ema_hash": io.params_hash(ema.state_dict()),
    }
    if pretrain_config is not None:
        meta["pretrain_config"] = asdict(pretrain_config)
    if started is not None:
        meta["started_at"] = started
    return io.save_container(path, arrays, meta)


def load_ardm_checkpoint(path, use_ema=True):
    """Rebuild the frozen Ardm from a checkpoint.

    ``use_ema`` loads the EMA shadow into the net (the sampling weights);
    otherwise the raw trained weights are used.
    """
    arrays, meta = io.load_container(path)
    if meta.get("kind") != "ardm_checkpoint":
        raise InvalidInput(f"{path}: not an ARDM checkpoint")
    cfg_dict = dict(meta["unet_config"])
    cfg_dict["dim_mults"] = tuple(cfg_dict["dim_mults"])
    unet_config = UNetConfig(**cfg_dict)
    net = UNet(unet_config)
    prefix = "ema" if use_ema else "theta"
    net.load_state_dict(io.arrays_state_dict(arrays, prefix))
    schedule = NoiseSchedule(int(meta["num_substeps"]),
                             logsnr_hi=meta["logsnr_hi"], logsnr_lo=meta["logsnr_lo"])
    mean, std = arrays["norm/mean_std"]
    ardm = Ardm(net, schedule, mean, std).freeze()
    return ardm, meta
