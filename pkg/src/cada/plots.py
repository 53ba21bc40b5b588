"""Figure emission for evaluated runs.

Space-time error heatmaps with the observation pattern overlaid, state
snapshot grids, and physics-diagnostic curves (total variation for 1-D
fields, dissipation rate for 2-D flows) against the ground truth.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import InvalidInput
from .metrics import dissipation_rate, total_variation


def _as_frames(x, spatial_ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 + spatial_ndim:
        raise InvalidInput(
            f"expected (frames, C, {'x' if spatial_ndim == 1 else 'xy'}) data, "
            f"got shape {x.shape}")
    return x


def error_heatmap(pred, truth, stream, out_path, title=""):
    """Space-time |error| map for a 1-D run, observation points overlaid.

    ``pred`` holds the rolled states for steps 1..H; ``truth`` the matching
    ground-truth frames.  Every stream arrival inside the horizon shows up
    as a marker row at its observed grid indices.
    """
    pred = _as_frames(pred, 1)
    truth = _as_frames(truth, 1)
    if pred.shape != truth.shape:
        raise InvalidInput(f"shape mismatch: {pred.shape} vs {truth.shape}")
    horizon, _, n = pred.shape
    err = np.abs(pred - truth)[:, 0].T      # (n, horizon)

    fig, ax = plt.subplots(figsize=(9, 3.2))
    im = ax.imshow(err, aspect="auto", origin="lower", cmap="magma",
                   extent=(0.5, horizon + 0.5, -0.5, n - 0.5))
    fig.colorbar(im, ax=ax, label="|error|")
    xs, ys = [], []
    for pos, j in enumerate(stream.times):
        if 1 <= j <= horizon:
            observed = np.flatnonzero(stream.masks[pos][0] > 0)
            xs.extend([int(j)] * len(observed))
            ys.extend(observed.tolist())
    if xs:
        ax.scatter(xs, ys, s=4, c="cyan", marker=".", linewidths=0,
                   label="observations")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("grid index")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def snapshot_grid(pred, truth, steps, out_path, title=""):
    """Prediction-vs-truth panels at chosen steps (1-D lines or 2-D images)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidInput(f"shape mismatch: {pred.shape} vs {truth.shape}")
    spatial_ndim = pred.ndim - 2
    if spatial_ndim not in (1, 2):
        raise InvalidInput(f"snapshots need 1-D or 2-D fields, got shape {pred.shape}")
    steps = [s for s in steps if 1 <= s <= pred.shape[0]]
    if not steps:
        raise InvalidInput("no requested snapshot step lies inside the horizon")

    if spatial_ndim == 1:
        fig, axes = plt.subplots(1, len(steps), figsize=(3.2 * len(steps), 2.6),
                                 squeeze=False)
        for ax, s in zip(axes[0], steps):
            ax.plot(truth[s - 1, 0], color="black", lw=1.0, label="truth")
            ax.plot(pred[s - 1, 0], color="crimson", lw=1.0, label="forecast")
            ax.set_title(f"step {s}", fontsize=9)
        axes[0][0].legend(fontsize=8)
    else:
        fig, axes = plt.subplots(2, len(steps), figsize=(2.6 * len(steps), 5.0),
                                 squeeze=False)
        lim = float(np.abs(truth[[s - 1 for s in steps], 0]).max()) or 1.0
        for col, s in enumerate(steps):
            for row, (label, data) in enumerate((("truth", truth), ("forecast", pred))):
                ax = axes[row][col]
                ax.imshow(data[s - 1, 0], cmap="RdBu_r", vmin=-lim, vmax=lim)
                ax.set_xticks([])
                ax.set_yticks([])
                if row == 0:
                    ax.set_title(f"step {s}", fontsize=9)
                if col == 0:
                    ax.set_ylabel(label)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def tv_curves(runs, truth, out_path, title=""):
    """Total-variation-vs-step curves for 1-D runs against the ground truth.

    ``runs`` maps a label to a (H, C, n) state array.
    """
    truth = _as_frames(truth, 1)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot([total_variation(f) for f in truth], color="black", lw=1.4,
            label="truth")
    for label, states in runs.items():
        states = _as_frames(states, 1)
        if states.shape != truth.shape:
            raise InvalidInput(f"{label}: shape {states.shape} vs truth {truth.shape}")
        ax.plot([total_variation(f) for f in states], lw=1.0, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("total variation")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def streamfunction(vorticity, length=2.0 * np.pi):
    """Spectral inversion psi of a periodic 2-D vorticity field.

    omega = -laplacian(psi) with the zero mode pinned to zero; the sign
    convention is irrelevant for quadratic diagnostics.
    """
    w = np.squeeze(np.asarray(vorticity, dtype=np.float64))
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise InvalidInput(f"streamfunction needs a square 2-D field, got shape {w.shape}")
    n = w.shape[0]
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=length / n)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    k2[0, 0] = 1.0
    psi_hat = np.fft.fft2(w) / k2
    psi_hat[0, 0] = 0.0
    return np.fft.ifft2(psi_hat).real


def dissipation_curves(runs, truth, nu, out_path, length=2.0 * np.pi, title=""):
    """Dissipation-vs-step curves for 2-D vorticity runs against the truth.

    Each stored vorticity frame is inverted to its streamfunction before
    the gradient-energy integral.
    """
    truth = _as_frames(truth, 2)

    def series(states):
        return [dissipation_rate(streamfunction(f[0], length), nu, length)
                for f in states]

    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(series(truth), color="black", lw=1.4, label="truth")
    for label, states in runs.items():
        states = _as_frames(states, 2)
        if states.shape != truth.shape:
            raise InvalidInput(f"{label}: shape {states.shape} vs truth {truth.shape}")
        ax.plot(series(states), lw=1.0, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("dissipation rate")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
