"""Inference-time rollouts: chunked guided forecasting plus two ablation
assimilators (per-step inner optimization and best-of-n selection).

The guided rollout re-anchors the preview window every ``horizon`` steps and
hands the last state of each chunk to the next one, so no step ever reads
an observation beyond its own chunk's bound.  The ablations share the same
frozen backbone: one optimizes free latent shifts on the fly, the other
picks the best of several unguided runs after the fact.
"""

import math

import numpy as np
import torch

from .controller import WindowTensors, controlled_substep, controlled_transition
from .errors import InvalidInput, NumericalError
from .obs import ObsStream, select_active


def _check_stream_shapes(x, streams):
    for stream in streams:
        if len(stream) and stream.values.shape[1:] != tuple(x.shape[1:]):
            raise InvalidInput(
                f"stream fields {stream.values.shape[1:]} do not match state "
                f"fields {tuple(x.shape[1:])}")


def chunk_lengths(n_steps, horizon):
    """Lengths of the re-anchoring chunks: full windows, then the remainder."""
    if n_steps < 1 or horizon < 1:
        raise InvalidInput(f"need n_steps >= 1 and horizon >= 1, "
                           f"got {n_steps}, {horizon}")
    n_chunks = math.ceil(n_steps / horizon)
    return [min(horizon, n_steps - c * horizon) for c in range(n_chunks)]


def rollout_chunked(ardm, net, x_init, streams, n_steps, horizon, generator,
                    gamma=1.0, audit=None):
    """Guided rollout of ``n_steps`` states with per-chunk preview anchoring.

    ``x_init`` is the physical state at step 0, either (C, *spatial) with a
    single stream or (B, C, *spatial) with one stream per batch element; all
    elements advance in lockstep against shared chunk anchors.  ``audit``,
    when given, collects every selector access for causality checks.
    """
    single = isinstance(streams, ObsStream)
    if single:
        streams = [streams]
    batched_rank = streams[0].spatial_ndim + 2
    unbatched = single and x_init.ndim == batched_rank - 1
    x = x_init[None] if unbatched else x_init
    if x.ndim != batched_rank:
        raise InvalidInput(f"x_init rank {x_init.ndim} does not fit fields of "
                           f"rank {batched_rank - 1}")
    if x.shape[0] != len(streams):
        raise InvalidInput(f"{x.shape[0]} states but {len(streams)} streams")
    _check_stream_shapes(x, streams)

    states = []
    anchor = 0
    with torch.no_grad():
        for length in chunk_lengths(n_steps, horizon):
            for k in range(length):
                t = anchor + k
                previews = [select_active(s, t, anchor, length, audit=audit)
                            for s in streams]
                window = WindowTensors.from_previews(previews, dtype=x.dtype)
                x = controlled_transition(ardm, net, x, window, generator, gamma).x_next
                states.append(x)
            anchor += length
    out = torch.stack(states)
    return out[:, 0] if unbatched else out


def trajectory_cost(stream, trajectory, n_steps=None):
    """Sum of arrival costs over a rolled trajectory.

    ``trajectory[k]`` is the state at step k + 1; every stream arrival j with
    j <= n_steps contributes its observation cost.
    """
    if n_steps is None:
        n_steps = len(trajectory)
    total = 0.0
    for pos, j in enumerate(stream.times):
        if 1 <= j <= n_steps:
            total += float(stream.cost(trajectory[j - 1], pos))
    return total


def bon_seed_pool(seed, n):
    """Per-candidate seeds; a prefix-stable function of (seed, index)."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(child.generate_state(1)[0]) for child in children]


def _prior_transition(ardm, x_cond, prior, controls=None):
    """Model-space transition from a pre-drawn prior latent."""
    schedule = ardm.schedule
    denoiser = ardm.denoiser()
    z = prior
    for i, s in enumerate(reversed(range(schedule.S))):
        u = None if controls is None else controls[i]
        z, _ = controlled_substep(schedule, denoiser, z, u, 1.0, x_cond, s)
    return z


def bon_rollout(ardm, x_init, stream, n_steps, n_candidates, seed, report=None):
    """Best-of-n unguided forecasting: n independent full rollouts, keep the
    one with the lowest total arrival cost (selection is entirely ex post).

    Candidate i always runs alone with seed pool entry i, so growing n leaves
    earlier candidates bit-identical and the winning cost never increases.
    """
    if n_candidates < 1:
        raise InvalidInput(f"need n_candidates >= 1, got {n_candidates}")
    _check_stream_shapes(x_init[None], [stream])
    x = ardm.normalize(x_init)[None]
    best_cost, best_traj, costs = None, None, []
    for cand_seed in bon_seed_pool(seed, n_candidates):
        generator = torch.Generator().manual_seed(cand_seed)
        trajectory = ardm.denormalize(ardm.rollout(x, n_steps, generator)[:, 0])
        cost = trajectory_cost(stream, trajectory, n_steps)
        costs.append(cost)
        if best_cost is None or cost < best_cost:
            best_cost, best_traj = cost, trajectory
    if report is not None:
        report.append({"costs": costs, "chosen": int(np.argmin(costs))})
    return best_traj


def tto_rollout(ardm, x_init, stream, n_steps, horizon, generator,
                inner_steps=20, lr=0.05, report=None):
    """Per-step inner optimization of free latent shifts (no learned policy).

    At each step the next arrival within the sliding ``horizon`` bound is
    located; free controls for every sub-step up to that arrival are refined
    by ``inner_steps`` gradient-descent updates of the arrival cost under
    common (frozen) prior draws.  The step is committed with the best
    controls seen, which includes the all-zero initialization, so a step is
    never made worse than unguided; inner blow-ups fall back the same way.
    """
    _check_stream_shapes(x_init[None], [stream])
    schedule = ardm.schedule
    n_sub = schedule.S
    x = ardm.normalize(x_init)[None]
    states = []
    for t in range(n_steps):
        first_prior = torch.empty_like(x).normal_(generator=generator)
        preview = select_active(stream, t, t, horizon)
        record = {"t": t, "arrival": preview.time, "fallback": False,
                  "cost_initial": None, "cost_committed": None}
        commit = None
        if not preview.empty and inner_steps > 0:
            segment = preview.time - t
            priors = [first_prior] + [torch.empty_like(x).normal_(generator=generator)
                                      for _ in range(segment - 1)]
            position = stream.arrival_position(preview.time)

            def segment_cost(controls):
                xm = x
                for k in range(segment):
                    xm = _prior_transition(ardm, xm, priors[k], controls[k])
                return stream.cost(ardm.denormalize(xm), position)

            shape = (segment, n_sub) + tuple(x.shape)
            u = torch.zeros(shape, dtype=x.dtype, requires_grad=True)
            best_cost, best_u = None, None
            try:
                for _ in range(inner_steps):
                    cost = segment_cost(u)
                    if not torch.isfinite(cost):
                        record["fallback"] = True
                        break
                    value = float(cost.detach())
                    if best_cost is None:
                        record["cost_initial"] = value
                    if best_cost is None or value < best_cost:
                        best_cost, best_u = value, u.detach().clone()
                    (grad,) = torch.autograd.grad(cost, u)
                    if not torch.isfinite(grad).all():
                        record["fallback"] = True
                        break
                    u = (u.detach() - lr * grad).requires_grad_()
                else:
                    cost = segment_cost(u)
                    if torch.isfinite(cost) and float(cost.detach()) < best_cost:
                        best_cost, best_u = float(cost.detach()), u.detach().clone()
            except NumericalError:
                record["fallback"] = True
            if best_u is not None:
                commit = best_u[0]
                record["cost_committed"] = best_cost
            else:
                record["fallback"] = True
        with torch.no_grad():
            x = _prior_transition(ardm, x, first_prior, commit)
        states.append(ardm.denormalize(x[0]))
        if report is not None:
            report.append(record)
    return torch.stack(states)
