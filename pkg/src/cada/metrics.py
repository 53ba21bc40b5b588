"""Trajectory and physics-aware evaluation metrics."""

import math

import numpy as np

from .errors import InvalidInput


def rmse(pred, truth):
    """Root of the mean squared error over time, space, and channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidInput(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def correlation_series(pred, truth):
    """Per-frame Pearson correlation over the flattened field.

    A zero-variance frame on either side yields correlation 0 for that
    frame (convention: a constant field carries no pattern to correlate).
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidInput(f"shape mismatch: {pred.shape} vs {truth.shape}")
    a = pred.reshape(pred.shape[0], -1)
    b = truth.reshape(truth.shape[0], -1)
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    num = np.sum(da * db, axis=1)
    den = np.sqrt(np.sum(da * da, axis=1) * np.sum(db * db, axis=1))
    out = np.zeros(pred.shape[0])
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def last_index_above(values, threshold):
    """Largest index whose value meets the threshold, or None."""
    idx = np.flatnonzero(np.asarray(values) >= threshold)
    return int(idx[-1]) if idx.size else None


def hct(pred, truth, threshold=0.9, dt=1.0):
    """High-correlation time: (index, physical time).

    The index is the LAST frame whose flattened-field Pearson correlation
    with the truth is >= threshold (a dip followed by recovery counts up to
    the recovery).  Returns (0, 0.0) when no frame qualifies.
    """
    pred = np.asarray(pred)
    if pred.shape[0] < 2:
        raise InvalidInput("need at least 2 frames for a correlation horizon")
    rho = correlation_series(pred, truth)
    idx = last_index_above(rho, threshold)
    if idx is None:
        return 0, 0.0
    return idx, idx * dt


def total_variation(z):
    """Discrete total variation of a periodic 1-D field: sum |z_{i+1} - z_i|
    with wraparound.  This is the Riemann sum of the integral of |dz/dxi|,
    so no grid-spacing factor enters; a sine of amplitude A gives 4A."""
    z = np.squeeze(np.asarray(z, dtype=np.float64))
    if z.ndim != 1:
        raise InvalidInput(f"total variation is defined for 1-D fields, got shape {z.shape}")
    return float(np.sum(np.abs(np.roll(z, -1) - z)))


def dissipation_rate(z, nu, length=2.0 * math.pi):
    """Small-scale dissipation of a periodic 2-D field: nu * integral of
    the squared gradient over the domain, with spectral derivatives."""
    z = np.squeeze(np.asarray(z, dtype=np.float64))
    if z.ndim != 2 or z.shape[0] != z.shape[1]:
        raise InvalidInput(f"dissipation rate needs a square 2-D field, got shape {z.shape}")
    n = z.shape[0]
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=length / n)
    z_hat = np.fft.fft2(z)
    zx = np.fft.ifft2(1j * k[:, None] * z_hat).real
    zy = np.fft.ifft2(1j * k[None, :] * z_hat).real
    cell = (length / n) ** 2
    return float(nu * cell * np.sum(zx ** 2 + zy ** 2))
