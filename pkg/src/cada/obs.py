"""Observation operators, regimes, streams, and the active-preview selector.

Two linear observation operators: binary spatial masking and block-average
downsampling (with nearest-neighbor lifting back to full resolution).  A
regime pairs one operator with a temporal arrival cadence; a stream is the
materialized sequence of observations for one trajectory.  The selector
picks, for the current step, the nearest upcoming arrival inside the
anchored preview window, never looking past the window bound.

Cost and pooling functions accept numpy arrays or torch tensors and remain
differentiable in x under torch.
"""

import re
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidInput

MASK = "mask"
DOWNSAMPLE = "downsample"


def _sum_trailing(x, batch_dims):
    axes = tuple(range(batch_dims, x.ndim))
    return x.sum(axes) if axes else x


def mask_cost(x, y, mask, batch_dims=0):
    """Masked squared error, normalized by the observed-point count.

    ||mask * (x - y)||^2 / ||mask||_1.  Leading ``batch_dims`` axes are kept;
    everything after them is reduced.
    """
    d = mask * (x - y)
    num = _sum_trailing(d * d, batch_dims)
    ones = x * 0 + 1
    den = _sum_trailing(mask * ones, batch_dims)
    if bool((den == 0).any() if hasattr(den, "any") else den == 0):
        raise InvalidInput("mask_cost with an all-zero mask is undefined")
    return num / den


def _repeat(x, factor, axis):
    if torch.is_tensor(x):
        return torch.repeat_interleave(x, factor, dim=axis)
    return np.repeat(x, factor, axis=axis)


def apply_downsample(x, factor, spatial_ndim):
    """Block-average pool by ``factor`` along trailing spatial axes, then
    lift back to full resolution by nearest-neighbor repetition.

    Idempotent: applying it twice equals applying it once.
    """
    if factor < 1:
        raise InvalidInput(f"downsample factor must be >= 1, got {factor}")
    if spatial_ndim < 1 or spatial_ndim > x.ndim:
        raise InvalidInput(f"spatial_ndim {spatial_ndim} invalid for rank-{x.ndim} input")
    if factor == 1:
        return x
    lead = x.ndim - spatial_ndim
    for axis in range(lead, x.ndim):
        if x.shape[axis] % factor:
            raise InvalidInput(f"axis of size {x.shape[axis]} not divisible by factor {factor}")
    pooled = x
    for axis in range(lead, x.ndim):
        n = pooled.shape[axis]
        shape = pooled.shape[:axis] + (n // factor, factor) + pooled.shape[axis + 1:]
        pooled = pooled.reshape(shape).mean(axis + 1)
    for axis in range(lead, x.ndim):
        pooled = _repeat(pooled, factor, axis)
    return pooled


def downsample_cost(x, y, factor, spatial_ndim, batch_dims=0):
    """Summed squared error between block-averaged versions of x and y."""
    d = apply_downsample(x, factor, spatial_ndim) - apply_downsample(y, factor, spatial_ndim)
    return _sum_trailing(d * d, batch_dims)


@dataclass(frozen=True)
class ObsRegime:
    """Observation operator kind + spatial factor + temporal cadence."""

    kind: str          # "mask" or "downsample"
    factor: int
    every: int         # arrivals at j = every, 2*every, ...
    phase: int = 0     # spatial stride phase for mask regimes

    def __post_init__(self):
        if self.kind not in (MASK, DOWNSAMPLE):
            raise InvalidInput(f"unknown observation kind {self.kind!r}")
        if self.factor < 1 or self.every < 1 or self.phase < 0:
            raise InvalidInput(f"bad regime: {self}")

    @property
    def name(self):
        prefix = "MS" if self.kind == MASK else "DS"
        return f"{prefix}-{self.factor}"


def regime_from_name(name):
    """Parse "DS-f" (downsample, arrivals every step) or "MS-f" (strided
    mask, arrivals every fourth step), f in {2, 4, 8}."""
    m = re.fullmatch(r"(DS|MS)-?([248])", name.strip().upper())
    if not m:
        raise InvalidInput(f"unknown regime {name!r} (expected DS-f or MS-f, f in 2/4/8)")
    factor = int(m.group(2))
    if m.group(1) == "DS":
        return ObsRegime(DOWNSAMPLE, factor, every=1)
    return ObsRegime(MASK, factor, every=4)


def strided_mask(spatial_shape, factor, phase=0):
    """Binary mask observing every ``factor``-th grid point per axis."""
    mask = np.ones((1,) + tuple(spatial_shape), dtype=np.float32)
    for i, n in enumerate(spatial_shape):
        keep = (np.arange(n) - phase) % factor == 0
        shape = [1] * (len(spatial_shape) + 1)
        shape[i + 1] = n
        mask = mask * keep.reshape(shape)
    return mask


@dataclass
class ObsStream:
    """All observations for one trajectory, ordered by arrival index."""

    regime: ObsRegime
    times: np.ndarray       # (A,) strictly increasing ints, all >= 1
    values: np.ndarray      # (A, C, *spatial), lifted to full resolution
    masks: np.ndarray       # (A, 1, *spatial) binary
    spatial_ndim: int
    traj_id: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        if self.times.size and (self.times[0] < 1 or np.any(np.diff(self.times) <= 0)):
            raise InvalidInput("arrival indices must be strictly increasing and >= 1")
        if len(self.values) != len(self.times) or len(self.masks) != len(self.times):
            raise InvalidInput("values/masks/times lengths disagree")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInput("non-finite observation values")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise InvalidInput("masks must be binary")

    def __len__(self):
        return len(self.times)

    def arrival_position(self, j):
        """Index into values/masks for arrival time j, or None."""
        pos = int(np.searchsorted(self.times, j))
        if pos < len(self.times) and self.times[pos] == j:
            return pos
        return None

    def cost(self, x, position, batch_dims=0):
        """Arrival cost of state x against observation #position."""
        y = self.values[position]
        if torch.is_tensor(x):
            y = torch.as_tensor(y, dtype=x.dtype, device=x.device)
        if self.regime.kind == MASK:
            m = self.masks[position]
            if torch.is_tensor(x):
                m = torch.as_tensor(m, dtype=x.dtype, device=x.device)
            return mask_cost(x, y, m, batch_dims=batch_dims)
        return downsample_cost(x, y, self.regime.factor, self.spatial_ndim, batch_dims=batch_dims)


def preview_cost(regime, spatial_ndim):
    """Arrival cost as a callable on (state, preview) pairs.

    Dispatches on the regime kind exactly like ObsStream.cost, but reads
    y*/M* from a PreviewWindow so guided transitions can score the state
    they just produced without holding the whole stream.
    """
    def call(x, preview, batch_dims=0):
        y = preview.values
        if torch.is_tensor(x):
            y = torch.as_tensor(np.asarray(y), dtype=x.dtype, device=x.device)
        if regime.kind == MASK:
            m = preview.mask
            if torch.is_tensor(x):
                m = torch.as_tensor(np.asarray(m), dtype=x.dtype, device=x.device)
            return mask_cost(x, y, m, batch_dims=batch_dims)
        return downsample_cost(x, y, regime.factor, spatial_ndim, batch_dims=batch_dims)
    return call


def build_stream(trajectory, regime, noise_seed=None, noise_std=0.0, traj_id=0):
    """Materialize the observation stream for one truth trajectory.

    ``trajectory`` has shape (n_frames, C, *spatial); state 0 is the initial
    condition and arrivals start at index ``regime.every``.  Observations
    are noiseless by default; ``noise_std`` > 0 adds Gaussian noise to the
    truth before the operator is applied.
    """
    trajectory = np.asarray(trajectory)
    if trajectory.ndim < 3:
        raise InvalidInput(f"trajectory must be (frames, C, *spatial), got shape {trajectory.shape}")
    spatial_ndim = trajectory.ndim - 2
    spatial = trajectory.shape[2:]
    horizon = trajectory.shape[0] - 1
    times = np.arange(regime.every, horizon + 1, regime.every, dtype=np.int64)
    rng = np.random.default_rng(noise_seed) if noise_std > 0 else None
    values = np.empty((len(times),) + trajectory.shape[1:], dtype=np.float32)
    if regime.kind == MASK:
        mask = strided_mask(spatial, regime.factor, regime.phase)
        masks = np.broadcast_to(mask, (len(times),) + mask.shape).copy()
    else:
        masks = np.ones((len(times), 1) + spatial, dtype=np.float32)
    for pos, j in enumerate(times):
        frame = trajectory[j].astype(np.float64)
        if rng is not None:
            frame = frame + noise_std * rng.standard_normal(frame.shape)
        if regime.kind == MASK:
            values[pos] = (mask * frame).astype(np.float32)
        else:
            values[pos] = apply_downsample(frame, regime.factor, spatial_ndim).astype(np.float32)
    return ObsStream(regime=regime, times=times, values=values, masks=masks,
                     spatial_ndim=spatial_ndim, traj_id=traj_id)


@dataclass(frozen=True)
class PreviewWindow:
    """Active observation for the current step, or the empty sentinel."""

    values: np.ndarray      # y* (C, *spatial); zeros when empty
    mask: np.ndarray        # M* (1, *spatial); zeros when empty
    delta: int              # j* - t; horizon when empty
    time: object            # j* (int) or None
    anchor: int
    horizon: int
    empty: bool
    step: int = 0           # t, the step the window was selected at


def select_active(stream, t, t0, horizon, audit=None):
    """Nearest upcoming arrival within the anchored window.

    Scans W = {j in the stream : t+1 <= j <= t0 + horizon} and returns the
    minimal member.  The window never extends past the anchor bound, so no
    arrival beyond t0 + horizon is ever touched.  ``audit``, when given,
    collects (t, anchor, bound, chosen) records for causality checks.
    """
    if horizon < 1:
        raise InvalidInput(f"horizon must be >= 1, got {horizon}")
    if not (t0 <= t < t0 + horizon):
        raise InvalidInput(f"step t={t} outside window [t0={t0}, t0+{horizon})")
    bound = t0 + horizon
    pos = int(np.searchsorted(stream.times, t + 1))
    chosen = None
    if pos < len(stream.times) and stream.times[pos] <= bound:
        chosen = int(stream.times[pos])
    if audit is not None:
        audit.append({"t": int(t), "anchor": int(t0), "bound": int(bound), "chosen": chosen})
    if chosen is None:
        # Zero-length streams still carry field shapes in their (0, ...) arrays.
        v_shape = stream.values.shape[1:] if stream.values.ndim > 1 else (1, 1)
        m_shape = stream.masks.shape[1:] if stream.masks.ndim > 1 else (1, 1)
        return PreviewWindow(
            values=np.zeros(v_shape, np.float32),
            mask=np.zeros(m_shape, np.float32),
            delta=int(horizon), time=None, anchor=int(t0), horizon=int(horizon), empty=True,
            step=int(t),
        )
    return PreviewWindow(
        values=stream.values[pos], mask=stream.masks[pos],
        delta=chosen - int(t), time=chosen, anchor=int(t0), horizon=int(horizon), empty=False,
        step=int(t),
    )


def stream_to_arrays(stream):
    """Container payload: (arrays, meta) for one stream."""
    arrays = {
        "obs_indices": stream.times,
        "obs_values": stream.values,
        "obs_masks": stream.masks,
    }
    meta = {
        "regime_kind": stream.regime.kind,
        "regime_factor": stream.regime.factor,
        "regime_every": stream.regime.every,
        "regime_phase": stream.regime.phase,
        "spatial_ndim": stream.spatial_ndim,
        "traj_id": stream.traj_id,
    }
    return arrays, meta


def stream_from_arrays(arrays, meta, prefix=""):
    regime = ObsRegime(
        kind=meta["regime_kind"], factor=int(meta["regime_factor"]),
        every=int(meta["regime_every"]), phase=int(meta["regime_phase"]),
    )
    return ObsStream(
        regime=regime,
        times=arrays[prefix + "obs_indices"],
        values=arrays[prefix + "obs_values"],
        masks=arrays[prefix + "obs_masks"],
        spatial_ndim=int(meta["spatial_ndim"]),
        traj_id=int(meta.get("traj_id", 0)),
    )


def pack_streams(streams):
    """Container payload for a family of streams sharing one regime.

    All streams must agree on regime, arrival times, and field shapes so
    the values stack rectangularly: obs_values becomes
    (n_streams, K, C, *spatial) and obs_indices stays the shared (K,) row.
    """
    if not streams:
        raise InvalidInput("no streams to pack")
    first = streams[0]
    for s in streams[1:]:
        if s.regime != first.regime or not np.array_equal(s.times, first.times):
            raise InvalidInput("streams disagree on regime or arrival times")
        if s.values.shape != first.values.shape or s.masks.shape != first.masks.shape:
            raise InvalidInput("streams disagree on field shapes")
    arrays = {
        "obs_indices": first.times,
        "obs_values": np.stack([s.values for s in streams]),
        "obs_masks": np.stack([s.masks for s in streams]),
    }
    meta = {
        "regime_kind": first.regime.kind,
        "regime_factor": first.regime.factor,
        "regime_every": first.regime.every,
        "regime_phase": first.regime.phase,
        "spatial_ndim": first.spatial_ndim,
        "traj_ids": [int(s.traj_id) for s in streams],
    }
    return arrays, meta


def unpack_streams(arrays, meta):
    """Inverse of pack_streams: list of per-trajectory streams."""
    regime = ObsRegime(
        kind=meta["regime_kind"], factor=int(meta["regime_factor"]),
        every=int(meta["regime_every"]), phase=int(meta["regime_phase"]),
    )
    values = arrays["obs_values"]
    masks = arrays["obs_masks"]
    times = arrays["obs_indices"]
    ids = meta.get("traj_ids", list(range(values.shape[0])))
    return [
        ObsStream(regime=regime, times=times, values=values[i], masks=masks[i],
                  spatial_ndim=int(meta["spatial_ndim"]), traj_id=int(ids[i]))
        for i in range(values.shape[0])
    ]
