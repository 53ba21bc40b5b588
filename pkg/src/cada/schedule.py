"""Variance-preserving diffusion noise schedule over denoising sub-steps.

Sub-step index s runs 0..S.  s=0 is clean data, s=S is (numerically) pure
noise.  Log signal-to-noise ratio is linear in s between fixed endpoints,
and the squared signal/noise amplitudes follow a sigmoid of it:

    lam_s    = hi + (lo - hi) * s / S
    mu_s^2   = sigmoid(lam_s)
    sigma_s^2 = 1 - mu_s^2

so mu_s^2 + sigma_s^2 = 1 at every s.  The s=0 entry is pinned to exactly
(mu, sigma) = (1, 0): the clean endpoint is exact, not approximate.  At
s=S the default endpoints leave sigma_S within 1e-3 of 1, close enough
that z^(S) is exchangeable with a fresh standard normal draw.
"""

import numpy as np
import torch

from .errors import InvalidInput


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _gather(table, s, like):
    """Coefficient lookup shaped to broadcast against ``like``.

    ``s`` may be a python int or an integer array/tensor with one entry per
    batch element; the result gets trailing singleton axes so it multiplies
    cleanly against (B, C, *spatial) data.
    """
    if torch.is_tensor(like):
        t = torch.as_tensor(table, dtype=like.dtype, device=like.device)
        idx = torch.as_tensor(s, dtype=torch.long, device=like.device)
        out = t[idx]
        while out.dim() < like.dim():
            out = out.unsqueeze(-1)
        return out
    arr = np.asarray(table, dtype=np.float64)[np.asarray(s, dtype=int)]
    extra = (1,) * max(np.ndim(like) - arr.ndim, 0)
    return arr.reshape(arr.shape + extra)


class NoiseSchedule:
    """Sigmoid-family VP schedule with S denoising sub-steps."""

    family = "sigmoid"

    def __init__(self, num_substeps, logsnr_hi=9.0, logsnr_lo=-9.0):
        if not isinstance(num_substeps, int) or num_substeps < 1:
            raise InvalidInput(f"num_substeps must be a positive int, got {num_substeps!r}")
        if not (np.isfinite(logsnr_hi) and np.isfinite(logsnr_lo) and logsnr_hi > logsnr_lo):
            raise InvalidInput(f"need finite logsnr_hi > logsnr_lo, got {logsnr_hi}, {logsnr_lo}")
        self.S = num_substeps
        self.logsnr_hi = float(logsnr_hi)
        self.logsnr_lo = float(logsnr_lo)
        s = np.arange(num_substeps + 1, dtype=np.float64)
        self.logsnr = logsnr_hi + (logsnr_lo - logsnr_hi) * s / num_substeps
        mu2 = _sigmoid(self.logsnr)
        self.mu = np.sqrt(mu2)
        self.sigma = np.sqrt(1.0 - mu2)
        # Exact clean endpoint.
        self.mu[0] = 1.0
        self.sigma[0] = 0.0

    def _check_s(self, s, lo, hi):
        s_arr = np.asarray(torch.as_tensor(s).cpu() if torch.is_tensor(s) else s)
        if not np.issubdtype(s_arr.dtype, np.integer):
            raise InvalidInput(f"sub-step index must be integer, got dtype {s_arr.dtype}")
        if s_arr.min() < lo or s_arr.max() > hi:
            raise InvalidInput(f"sub-step index {s} outside [{lo}, {hi}]")

    def noise_state(self, x0, eps, s):
        """Forward marginal: z^(s) = mu_s x0 + sigma_s eps."""
        self._check_s(s, 0, self.S)
        return _gather(self.mu, s, x0) * x0 + _gather(self.sigma, s, x0) * eps

    def v_from(self, x0, eps, s):
        """Velocity target: v = mu_s eps - sigma_s x0."""
        self._check_s(s, 0, self.S)
        return _gather(self.mu, s, x0) * eps - _gather(self.sigma, s, x0) * x0

    def x0_from_v(self, z, v, s):
        """Recover the clean estimate: x0 = mu_s z - sigma_s v."""
        self._check_s(s, 0, self.S)
        return _gather(self.mu, s, z) * z - _gather(self.sigma, s, z) * v

    def eps_from_v(self, z, v, s):
        """Recover the noise estimate: eps = sigma_s z + mu_s v."""
        self._check_s(s, 0, self.S)
        return _gather(self.sigma, s, z) * z + _gather(self.mu, s, z) * v

    def ddim_substep(self, z_next, x0_hat, s):
        """Deterministic update from z^(s+1) to z^(s) given the x0 estimate.

        z^(s) = mu_s x0_hat + (sigma_s / sigma_{s+1}) (z^(s+1) - mu_{s+1} x0_hat)

        At s=0 the noise-direction coefficient is exactly zero, so the
        update collapses to x0_hat.
        """
        self._check_s(s, 0, self.S - 1)
        s_arr = np.atleast_1d(np.asarray(torch.as_tensor(s).cpu() if torch.is_tensor(s) else s))
        if np.any(self.sigma[s_arr + 1] == 0.0):
            raise InvalidInput("ddim_substep from a zero-noise source level is undefined")
        if torch.is_tensor(s):
            s_next = s + 1
        else:
            s_next = np.asarray(s) + 1
        ratio = _gather(self.sigma, s, z_next) / _gather(self.sigma, s_next, z_next)
        return _gather(self.mu, s, z_next) * x0_hat + ratio * (
            z_next - _gather(self.mu, s_next, z_next) * x0_hat
        )

    def normalized_logsnr(self, s):
        """logSNR rescaled to [0, 1] over the schedule range (1 at s=0)."""
        lam = np.asarray(self.logsnr)[np.asarray(s, dtype=int)]
        return (lam - self.logsnr_lo) / (self.logsnr_hi - self.logsnr_lo)

    def alpha(self, s):
        """Continuous-time signal power alpha(s) = mu(s)^2 for real s in [0, S].

        The discrete table is this map sampled at integer s (before the
        exact clean-endpoint override).
        """
        s = np.asarray(s, dtype=np.float64)
        if np.any(s < 0) or np.any(s > self.S):
            raise InvalidInput(f"continuous sub-step time {s} outside [0, {self.S}]")
        lam = self.logsnr_hi + (self.logsnr_lo - self.logsnr_hi) * s / self.S
        return _sigmoid(lam)

    def __repr__(self):
        return (f"NoiseSchedule(S={self.S}, logsnr=[{self.logsnr_hi:+.1f}, "
                f"{self.logsnr_lo:+.1f}])")
