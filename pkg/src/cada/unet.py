"""Dimension-generic residual U-Net denoiser backbone.

Conv-GroupNorm-SiLU residual blocks over a down/up multiscale path, with
self-attention at the coarser resolutions and a learned sinusoidal
embedding of the denoising sub-step index injected into every block.
The same code builds the 1-D and 2-D variants; conditioning enters by
channel concatenation at the input.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInput


def conv_nd(spatial_ndim):
    if spatial_ndim == 1:
        return nn.Conv1d
    if spatial_ndim == 2:
        return nn.Conv2d
    raise InvalidInput(f"unsupported spatial rank {spatial_ndim}")


@dataclass(frozen=True)
class UNetConfig:
    spatial_ndim: int = 1
    in_channels: int = 1
    cond_channels: int = 1
    base_dim: int = 32
    dim_mults: tuple = (1, 2, 4)
    blocks_per_level: int = 1
    sinusoidal_dim: int = 128
    groups: int = 8
    attn_heads: int = 4
    attn_levels: int = 2  # how many of the deepest levels get attention

    def __post_init__(self):
        if self.base_dim % self.groups:
            raise InvalidInput("base_dim must be divisible by the group-norm group count")
        if len(self.dim_mults) < 1 or self.sinusoidal_dim % 2:
            raise InvalidInput(f"bad backbone config: {self}")


class LearnedSinusoidal(nn.Module):
    """Random-Fourier-features embedding with learned frequencies."""

    def __init__(self, dim):
        super().__init__()
        self.weights = nn.Parameter(torch.randn(dim // 2))

    def forward(self, t):
        angles = t[:, None] * self.weights[None, :] * 2.0 * math.pi
        return torch.cat([t[:, None], angles.sin(), angles.cos()], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, nd, dim_in, dim_out, time_dim, groups):
        super().__init__()
        conv = conv_nd(nd)
        self.conv1 = conv(dim_in, dim_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(groups, dim_out)
        self.conv2 = conv(dim_out, dim_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, dim_out)
        self.time_proj = nn.Linear(time_dim, dim_out)
        self.skip = conv(dim_in, dim_out, 1) if dim_in != dim_out else nn.Identity()
        self.nd = nd

    def forward(self, x, t_emb):
        h = F.silu(self.norm1(self.conv1(x)))
        t = self.time_proj(t_emb)
        h = h + t.reshape(t.shape + (1,) * self.nd)
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Attention(nn.Module):
    """Multi-head self-attention over flattened spatial positions."""

    def __init__(self, dim, heads, groups):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, dim)
        self.qkv = nn.Conv1d(dim, dim * 3, 1)
        self.proj = nn.Conv1d(dim, dim, 1)

    def forward(self, x):
        b, c = x.shape[:2]
        spatial = x.shape[2:]
        flat = self.norm(x).reshape(b, c, -1)
        q, k, v = self.qkv(flat).reshape(b, 3, self.heads, c // self.heads, -1).unbind(1)
        attn = F.scaled_dot_product_attention(
            q.transpose(-2, -1), k.transpose(-2, -1), v.transpose(-2, -1))
        out = self.proj(attn.transpose(-2, -1).reshape(b, c, -1))
        return x + out.reshape(b, c, *spatial)


class UNet(nn.Module):
    """v-prediction denoiser: forward(z, s, cond) -> v_hat."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        nd = config.spatial_ndim
        conv = conv_nd(nd)
        dims = [config.base_dim * m for m in config.dim_mults]
        time_dim = config.base_dim * 4
        self.time_mlp = nn.Sequential(
            LearnedSinusoidal(config.sinusoidal_dim),
            nn.Linear(config.sinusoidal_dim + 1, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.init_conv = conv(config.in_channels + config.cond_channels, dims[0], 3, padding=1)

        attn_from = len(dims) - config.attn_levels
        self.downs = nn.ModuleList()
        for level, dim_out in enumerate(dims):
            dim_in = dims[max(level - 1, 0)]
            blocks = nn.ModuleList()
            for i in range(config.blocks_per_level):
                blocks.append(ResBlock(nd, dim_in if i == 0 else dim_out, dim_out,
                                       time_dim, config.groups))
            attn = Attention(dim_out, config.attn_heads, config.groups) \
                if level >= attn_from else nn.Identity()
            down = conv(dim_out, dim_out, 3, stride=2, padding=1) \
                if level < len(dims) - 1 else nn.Identity()
            self.downs.append(nn.ModuleList([blocks, attn, down]))

        self.mid1 = ResBlock(nd, dims[-1], dims[-1], time_dim, config.groups)
        self.mid_attn = Attention(dims[-1], config.attn_heads, config.groups)
        self.mid2 = ResBlock(nd, dims[-1], dims[-1], time_dim, config.groups)

        self.ups = nn.ModuleList()
        for level in reversed(range(len(dims))):
            dim_out = dims[level]
            dim_in = dims[min(level + 1, len(dims) - 1)]
            blocks = nn.ModuleList()
            for i in range(config.blocks_per_level):
                # first block eats the skip concat
                blocks.append(ResBlock(nd, (dim_in + dim_out) if i == 0 else dim_out,
                                       dim_out, time_dim, config.groups))
            attn = Attention(dim_out, config.attn_heads, config.groups) \
                if level >= attn_from else nn.Identity()
            up = conv(dim_out, dim_out, 3, padding=1) if level > 0 else nn.Identity()
            self.ups.append(nn.ModuleList([blocks, attn, up]))

        self.final_norm = nn.GroupNorm(config.groups, dims[0])
        self.final_conv = conv(dims[0], config.in_channels, 3, padding=1)

    def forward(self, z, s, cond):
        cfg = self.config
        if z.shape[1] != cfg.in_channels or cond.shape[1] != cfg.cond_channels:
            raise InvalidInput(f"channel mismatch: z {tuple(z.shape)}, cond {tuple(cond.shape)}")
        if z.shape[0] != cond.shape[0] or z.shape[2:] != cond.shape[2:]:
            raise InvalidInput(f"z/cond shapes disagree: {tuple(z.shape)} vs {tuple(cond.shape)}")
        depth = len(cfg.dim_mults) - 1
        if any(n % (1 << depth) for n in z.shape[2:]):
            raise InvalidInput(f"grid {tuple(z.shape[2:])} not divisible by 2^{depth}")
        s = torch.as_tensor(s, dtype=z.dtype, device=z.device)
        if s.dim() == 0:
            s = s.expand(z.shape[0])
        t_emb = self.time_mlp(s)

        h = self.init_conv(torch.cat([z, cond], dim=1))
        skips = []
        for blocks, attn, down in self.downs:
            for block in blocks:
                h = block(h, t_emb)
            h = attn(h)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, t_emb)), t_emb)
        for blocks, attn, up in self.ups:
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, t_emb)
            h = attn(h)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.final_conv(F.silu(self.final_norm(h)))


class Ema:
    """Exponential moving average of named parameters.

    The shadow starts as a copy of the model and moves toward it every
    ``every`` optimizer steps with the given decay.
    """

    def __init__(self, model, decay=0.995, every=10):
        if not (0.0 < decay < 1.0):
            raise InvalidInput(f"EMA decay must be in (0, 1), got {decay}")
        if every < 1:
            raise InvalidInput(f"EMA cadence must be >= 1, got {every}")
        self.decay = decay
        self.every = every
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def maybe_update(self, model, step):
        """Blend after optimizer step ``step`` (1-based) when due."""
        if step % self.every:
            return False
        with torch.no_grad():
            for k, v in model.state_dict().items():
                if v.dtype.is_floating_point:
                    self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)
                else:
                    self.shadow[k].copy_(v)
        return True

    def copy_to(self, model):
        model.load_state_dict(self.shadow)

    def state_dict(self):
        return dict(self.shadow)
