"""Named experiment configurations.

Two families: the full-scale settings for each benchmark system, and a
desk-scale configuration small enough to run end-to-end on one machine
while still showing the guided-over-unguided ordering.
"""

import math
from dataclasses import dataclass

from .ardm import PretrainConfig
from .controller import ControllerConfig
from .errors import InvalidInput
from .pde import KolmogorovConfig, KSConfig
from .training import TrainConfig
from .unet import UNetConfig


@dataclass(frozen=True)
class Preset:
    """Everything one experiment needs, from simulator to evaluation."""

    name: str
    pde: object                 # KSConfig or KolmogorovConfig
    unet: UNetConfig
    pretrain: PretrainConfig
    controller: ControllerConfig
    train: TrainConfig          # train.horizon is the preview horizon
    regime: str                 # default observation regime
    n_train: int
    n_val: int
    n_test: int
    train_frames: int
    test_frames: int
    eval_steps: tuple           # rollout horizons for evaluation
    bon_candidates: int
    hct_threshold: float = 0.9
    dataset_seed: int = 7


def ks_full():
    """Kuramoto-Sivashinsky at full scale: 256-point grid, preview 54."""
    return Preset(
        name="ks-full",
        pde=KSConfig(n=256, length=64.0 * math.pi, nu=1.0, dt=0.2),
        unet=UNetConfig(spatial_ndim=1, base_dim=64, dim_mults=(1, 2, 4, 8),
                        sinusoidal_dim=128, groups=8, attn_heads=4, attn_levels=2),
        pretrain=PretrainConfig(steps=1_000_000, batch_size=32, lr=3.2e-4,
                                ema_decay=0.995, ema_every=10, num_substeps=3),
        controller=ControllerConfig(spatial_ndim=1, hid=128, groups=8),
        train=TrainConfig(horizon=54, steps=5000, batch_windows=4, lr=1e-4,
                          substep_costs=True),
        regime="MS-4",
        n_train=1024, n_val=16, n_test=16,
        train_frames=140, test_frames=640,
        eval_steps=(140, 640),
        bon_candidates=16,
    )


def kolmogorov_full():
    """Kolmogorov flow at full scale: 64x64 grid, preview 16."""
    return Preset(
        name="kolmogorov-full",
        pde=KolmogorovConfig(n=64, nu=0.025, forcing_wavenumber=4,
                             forcing_amplitude=1.0, dt=0.2),
        unet=UNetConfig(spatial_ndim=2, base_dim=64, dim_mults=(1, 2, 4, 8),
                        sinusoidal_dim=128, groups=8, attn_heads=4, attn_levels=2),
        pretrain=PretrainConfig(steps=1_000_000, batch_size=32, lr=3.2e-4,
                                ema_decay=0.995, ema_every=10, num_substeps=3),
        controller=ControllerConfig(spatial_ndim=2, hid=128, groups=8),
        train=TrainConfig(horizon=16, steps=5000, batch_windows=4, lr=1e-4,
                          substep_costs=True),
        regime="MS-4",
        n_train=1024, n_val=16, n_test=16,
        train_frames=64, test_frames=180,
        eval_steps=(60, 180),
        bon_candidates=16,
    )


def ks_desk():
    """Single-machine configuration: 64-point grid, short previews, a small
    backbone, and training budgets that fit in hours on a CPU."""
    return Preset(
        name="ks-desk",
        pde=KSConfig(n=64, length=16.0 * math.pi, nu=1.0, dt=0.2),
        unet=UNetConfig(spatial_ndim=1, base_dim=48, dim_mults=(1, 2, 4),
                        sinusoidal_dim=16, groups=8, attn_heads=4, attn_levels=1),
        pretrain=PretrainConfig(steps=20_000, batch_size=32, lr=3.2e-4,
                                ema_decay=0.995, ema_every=10, num_substeps=3),
        controller=ControllerConfig(spatial_ndim=1, hid=64, groups=8),
        train=TrainConfig(horizon=16, steps=5000, batch_windows=4, lr=3e-4,
                          cosine_lr=True, substep_costs=True, checkpoint_every=500),
        regime="MS-4",
        n_train=256, n_val=8, n_test=16,
        train_frames=160, test_frames=160,
        eval_steps=(100,),
        bon_candidates=4,
    )


PRESETS = {
    "ks-full": ks_full,
    "kolmogorov-full": kolmogorov_full,
    "ks-desk": ks_desk,
}


def preset(name):
    try:
        factory = PRESETS[name]
    except KeyError:
        raise InvalidInput(
            f"unknown preset {name!r} (have: {', '.join(sorted(PRESETS))})") from None
    return factory()
