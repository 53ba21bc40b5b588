"""Offline training of the control policy on anchored preview windows.

Each update samples a batch of windows (a trajectory index and an anchor
frame), teacher-forces the anchor state, rolls the guided sampler forward
for the full window, and scores the produced states against the arrivals
inside the window.  The backbone stays frozen throughout; only the policy
weights move.  Every backbone call is recomputation-checkpointed so the
stored activations stay bounded in the window length.
"""

import json
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.checkpoint import checkpoint as _recompute

from .controller import WindowTensors, controlled_transition, save_controller_checkpoint
from .errors import InvalidInput, NumericalError
from .obs import MASK, downsample_cost, mask_cost, select_active


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one controller-training run."""

    horizon: int                  # preview window length, >= 1
    steps: int = 5000
    batch_windows: int = 4
    lr: float = 1e-4
    cosine_lr: bool = True
    gamma: float = 1.0            # control strength used during rollouts
    beta: float = 0.0             # tilt strength; the trained objective fixes it at 0
    substep_costs: bool = False   # also score per-sub-step state estimates at arrivals
    grad_checkpoint: bool = True
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0     # 0: only the final checkpoint is written
    divergence_factor: float = 1e3
    divergence_patience: int = 100

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidInput(f"horizon must be >= 1, got {self.horizon}")
        if self.steps < 1 or self.batch_windows < 1:
            raise InvalidInput("steps and batch_windows must be positive")
        if self.beta != 0.0:
            raise InvalidInput("the trained objective has no tilt term; beta must be 0")
        if self.divergence_patience < 1:
            raise InvalidInput("divergence_patience must be >= 1")


@dataclass
class TrainingWindow:
    """One training window: anchor frame, teacher-forced state, its stream."""

    anchor: int
    x_init: torch.Tensor    # (C, *spatial), physical units
    stream: object          # ObsStream for the same trajectory


def arrival_count(stream, anchor, horizon):
    """Number of stream arrivals inside (anchor, anchor + horizon]."""
    lo = int(np.searchsorted(stream.times, anchor + 1))
    hi = int(np.searchsorted(stream.times, anchor + horizon + 1))
    return hi - lo


class _Recomputing:
    """Backbone proxy whose denoiser recomputes activations on backward."""

    def __init__(self, ardm):
        self._ardm = ardm

    def __getattr__(self, name):
        return getattr(self._ardm, name)

    def denoiser(self):
        inner = self._ardm.denoiser()
        def call(z, s, cond):
            if torch.is_grad_enabled() and z.requires_grad:
                return _recompute(inner, z, s, cond, use_reentrant=False)
            return inner(z, s, cond)
        return call


def _arrival_cost(regime, spatial_ndim, x, values, mask):
    """Per-element arrival cost for an already-filtered batch."""
    if regime.kind == MASK:
        return mask_cost(x, values.to(x.dtype), mask.to(x.dtype), batch_dims=1)
    return downsample_cost(x, values.to(x.dtype), regime.factor, spatial_ndim,
                           batch_dims=1)


def window_losses(ardm, net, windows, cfg, generator):
    """Vectorized window objective; returns one loss per window.

    All windows advance in lockstep: at local frame k each element selects
    its own active preview, the batch takes one guided transition, and
    elements whose next step lands on an arrival accumulate that arrival's
    cost (plus, optionally, the mean cost of the per-sub-step state
    estimates).  Each total is normalized by that window's arrival count.
    """
    if not windows:
        raise InvalidInput("need at least one window")
    regimes = {w.stream.regime for w in windows}
    if len(regimes) != 1:
        raise InvalidInput("windows in one batch must share an observation regime")
    regime = regimes.pop()
    spatial_ndim = windows[0].stream.spatial_ndim

    x = torch.stack([w.x_init for w in windows])
    backbone = _Recomputing(ardm) if cfg.grad_checkpoint else ardm
    total = torch.zeros(len(windows), dtype=x.dtype)
    for k in range(cfg.horizon):
        previews = [select_active(w.stream, w.anchor + k, w.anchor, cfg.horizon)
                    for w in windows]
        wt = WindowTensors.from_previews(previews, dtype=x.dtype)
        result = controlled_transition(backbone, net, x, wt, generator, cfg.gamma)
        x = result.x_next
        hit = wt.arrival.nonzero(as_tuple=False).squeeze(1)
        if hit.numel():
            cost = _arrival_cost(regime, spatial_ndim, x[hit],
                                 wt.values[hit], wt.mask[hit])
            if cfg.substep_costs:
                per_sub = [_arrival_cost(regime, spatial_ndim, x0[hit],
                                         wt.values[hit], wt.mask[hit])
                           for x0 in result.x0_previews]
                cost = cost + sum(per_sub) / len(per_sub)
            total = total.index_add(0, hit, cost)
    counts = torch.tensor([max(arrival_count(w.stream, w.anchor, cfg.horizon), 1)
                           for w in windows], dtype=x.dtype)
    return total / counts


def window_loss(ardm, net, window, cfg, generator):
    """Objective of a single window; NumericalError if it is not finite."""
    loss = window_losses(ardm, net, [window], cfg, generator)[0]
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite window loss at anchor {window.anchor}")
    return loss


def _grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def train_controller(ardm, net, dataset, streams, cfg, log_path=None,
                     checkpoint_path=None, ardm_hash=None):
    """Fit the policy against a frozen backbone; returns (net, history).

    Windows are drawn uniformly: a trajectory index, then an anchor frame
    such that the full window fits inside the trajectory.  The anchor state
    is teacher-forced from the dataset; everything after it comes from the
    guided sampler.  Batches whose windows all lack arrivals are skipped.
    Training aborts if the loss stays above ``divergence_factor`` times the
    initial loss for ``divergence_patience`` consecutive updates, and the
    backbone weights are hash-checked afterwards.
    """
    data = np.asarray(dataset)
    if data.ndim < 4:
        raise InvalidInput(f"dataset must be (traj, frames, C, *spatial), got {data.shape}")
    n_traj, n_frames = data.shape[:2]
    if len(streams) != n_traj:
        raise InvalidInput(f"{n_traj} trajectories but {len(streams)} streams")
    max_anchor = n_frames - 1 - cfg.horizon
    if max_anchor < 0:
        raise InvalidInput(f"trajectories of {n_frames} frames cannot host a "
                           f"window of length {cfg.horizon}")

    theta_before = ardm.params_hash()
    params = [p for p in net.parameters() if p.requires_grad]
    if not params:
        raise InvalidInput("policy has no trainable parameters")
    dtype = params[0].dtype
    opt = torch.optim.Adam(params, lr=cfg.lr)
    lr_sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
                if cfg.cosine_lr else None)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    if ardm_hash is None:
        ardm_hash = theta_before
    regime = streams[0].regime
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    def write_checkpoint(step):
        save_controller_checkpoint(
            checkpoint_path, net, gamma=cfg.gamma, horizon=cfg.horizon,
            regime=regime, ardm_hash=ardm_hash, train_config=cfg, step=step,
            started=started)

    history = []
    log_file = open(log_path, "w") if log_path else None
    initial = None
    runaway = 0
    try:
        for step in range(1, cfg.steps + 1):
            tick = time.time()
            idx = rng.integers(0, n_traj, size=cfg.batch_windows)
            anchors = rng.integers(0, max_anchor + 1, size=cfg.batch_windows)
            windows = [TrainingWindow(int(a), torch.as_tensor(data[i, a], dtype=dtype),
                                      streams[i])
                       for i, a in zip(idx, anchors)]
            if all(arrival_count(w.stream, w.anchor, cfg.horizon) == 0
                   for w in windows):
                # nothing to score, nothing to differentiate
                record = {"step": step, "loss": 0.0, "grad_norm": 0.0,
                          "wall_time": time.time() - tick, "skipped": True}
                history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                continue
            loss = window_losses(ardm, net, windows, cfg, generator).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at update {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = _grad_norm(params)
            opt.step()
            if lr_sched is not None:
                lr_sched.step()

            value = loss.item()
            if initial is None:
                initial = value
            if initial > 0 and value > cfg.divergence_factor * initial:
                runaway += 1
            else:
                runaway = 0
            if runaway >= cfg.divergence_patience:
                raise NumericalError(
                    f"training diverged: loss {value:.6g} above "
                    f"{cfg.divergence_factor:g} x initial {initial:.6g} for "
                    f"{runaway} consecutive updates (aborted at update {step})")

            record = {"step": step, "loss": value, "grad_norm": grad_norm,
                      "wall_time": time.time() - tick}
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                if step % cfg.log_every == 0:
                    log_file.flush()
            if (checkpoint_path and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == 0):
                write_checkpoint(step)
    finally:
        if log_file:
            log_file.close()

    if ardm.params_hash() != theta_before:
        raise NumericalError("frozen backbone weights changed during controller training")
    if checkpoint_path:
        write_checkpoint(cfg.steps)
    return net, history
