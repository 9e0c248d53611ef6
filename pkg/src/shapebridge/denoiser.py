"""Volumetric denoiser network with timestep and shape conditioning.

An encoder-decoder over 3D grids: two residual blocks per stage
(group norm -> SiLU -> 3x3x3 conv), average-pool downsampling, nearest
upsampling plus convolution with skip concatenation on the way up. The
sinusoidal timestep embedding passes through a two-layer projection and
enters every residual block as a per-channel scale and shift on the first
group norm. The single-channel output convolution starts at zero, so a
fresh model is the zero function.

Shape conditions enter as extra input channels concatenated with the
noisy volume, in the order fixed by the config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DataError, GeometryMismatchError
from .volume import VoxelGrid

CONDITION_NAMES = ("s_cortex", "s_pial", "s_white", "edge", "ribbon")


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; the desk default is a 2-stage UNet."""

    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2)
    condition_channels: tuple[str, ...] = ("s_pial", "s_white", "edge", "ribbon")
    time_width: int = 64
    groups: int = 8
    attention: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        object.__setattr__(self, "condition_channels", tuple(self.condition_channels))
        if self.base_channels < 1 or self.time_width < 2 or self.groups < 1:
            raise DataError("all channel/width counts must be positive")
        if self.time_width % 2:
            raise DataError("time embedding width must be even")
        if not self.channel_mults or any(m < 1 for m in self.channel_mults):
            raise DataError("channel multipliers must be positive")
        unknown = set(self.condition_channels) - set(CONDITION_NAMES)
        if unknown:
            raise DataError(f"unknown condition channels {sorted(unknown)}")
        if len(set(self.condition_channels)) != len(self.condition_channels):
            raise DataError("duplicate condition channels")

    @property
    def in_channels(self) -> int:
        return 1 + len(self.condition_channels)

    @property
    def num_stages(self) -> int:
        return len(self.channel_mults)

    @property
    def dims_divisor(self) -> int:
        return 2 ** (self.num_stages - 1)

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "condition_channels": list(self.condition_channels),
            "time_width": self.time_width,
            "groups": self.groups,
            "attention": self.attention,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        return cls(
            base_channels=int(data["base_channels"]),
            channel_mults=tuple(data["channel_mults"]),
            condition_channels=tuple(data["condition_channels"]),
            time_width=int(data["time_width"]),
            groups=int(data["groups"]),
            attention=bool(data["attention"]),
        )


def _norm_groups(preferred: int, channels: int) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


def sinusoidal_embedding(t: torch.Tensor, width: int) -> torch.Tensor:
    """Classic sin/cos position features of the integer timestep, (B, width)."""
    half = width // 2
    exponents = torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    freqs = torch.exp(-math.log(10000.0) * exponents)
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ResidualBlock(nn.Module):
    """GN -> SiLU -> conv twice, with the time embedding modulating the
    first normalization (per-channel scale and shift)."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(groups, in_ch), in_ch)
        self.film = nn.Linear(time_dim, 2 * in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_norm_groups(groups, out_ch), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        scale, shift = self.film(emb)[:, :, None, None, None].chunk(2, dim=1)
        h = self.norm1(x) * (1.0 + scale) + shift
        h = self.conv1(F.silu(h))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-head global self-attention over all voxels (optional)."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(_norm_groups(groups, channels), channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, *dims = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3 * c, -1).chunk(3, dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        h = (v @ attn.transpose(1, 2)).reshape(b, c, *dims)
        return x + self.proj(h)


class DenoiserModel(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chans = [config.base_channels * m for m in config.channel_mults]
        time_dim = 2 * config.time_width
        self.time_dim = time_dim
        self.time_proj = nn.Sequential(
            nn.Linear(config.time_width, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.stem = nn.Conv3d(config.in_channels, chans[0], 3, padding=1)
        self.encoder = nn.ModuleList()
        for s, ch in enumerate(chans):
            prev = chans[s - 1] if s else chans[0]
            self.encoder.append(
                nn.ModuleList(
                    [
                        ResidualBlock(prev, ch, time_dim, config.groups),
                        ResidualBlock(ch, ch, time_dim, config.groups),
                    ]
                )
            )
        self.pool = nn.AvgPool3d(2)
        self.attention = (
            AttentionBlock(chans[-1], config.groups) if config.attention else None
        )
        self.upconvs = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for s in range(len(chans) - 2, -1, -1):
            self.upconvs.append(nn.Conv3d(chans[s + 1], chans[s], 3, padding=1))
            self.decoder.append(
                nn.ModuleList(
                    [
                        ResidualBlock(2 * chans[s], chans[s], time_dim, config.groups),
                        ResidualBlock(chans[s], chans[s], time_dim, config.groups),
                    ]
                )
            )
        self.head_norm = nn.GroupNorm(_norm_groups(config.groups, chans[0]), chans[0])
        self.head = nn.Conv3d(chans[0], 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """x: (B, in_channels, nx, ny, nz); t: (B,) timesteps -> (B, 1, ...)."""
        if x.shape[1] != self.config.in_channels:
            raise DataError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        divisor = self.config.dims_divisor
        if any(d % divisor for d in x.shape[2:]):
            raise DataError(
                f"grid dims {tuple(x.shape[2:])} not divisible by {divisor}"
            )
        feats = sinusoidal_embedding(t, self.config.time_width)
        emb = self.time_proj(feats.to(self.stem.weight.dtype))
        h = self.stem(x)
        skips = []
        for s, stage in enumerate(self.encoder):
            if s:
                h = self.pool(h)
            for block in stage:
                h = block(h, emb)
            skips.append(h)
        if self.attention is not None:
            h = self.attention(h)
        for i, (upconv, stage) in enumerate(zip(self.upconvs, self.decoder)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = upconv(h)
            h = torch.cat([h, skips[len(self.encoder) - 2 - i]], dim=1)
            for block in stage:
                h = block(h, emb)
        return self.head(F.silu(self.head_norm(h)))


def init_parameters(model: DenoiserModel, seed: int):
    """Deterministic parameter init driven by a numpy generator.

    Conv/linear weights and biases draw uniform(-1/sqrt(fan_in), ...);
    norm scales start at 1 and shifts at 0; the output head (and the
    attention projection, when present) start at exactly zero.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.ndim >= 2:  # conv / linear weight
                fan_in = param[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                param.copy_(torch.from_numpy(
                    rng.uniform(-bound, bound, size=tuple(param.shape))
                ).float())
            elif name.endswith("bias") and ("norm" not in name):
                fan_in = _bias_fan_in(model, name)
                bound = 1.0 / math.sqrt(fan_in) if fan_in else 0.0
                param.copy_(torch.from_numpy(
                    rng.uniform(-bound, bound, size=tuple(param.shape))
                ).float())
            elif "norm" in name and name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()
        model.head.weight.zero_()
        model.head.bias.zero_()
        if model.attention is not None:
            model.attention.proj.weight.zero_()
            model.attention.proj.bias.zero_()


def _bias_fan_in(model: DenoiserModel, bias_name: str) -> int:
    weight_name = bias_name[: -len("bias")] + "weight"
    weight = dict(model.named_parameters())[weight_name]
    return weight[0].numel() if weight.ndim >= 2 else 0


def build_model(config: DenoiserConfig, seed: int = 0) -> DenoiserModel:
    model = DenoiserModel(config)
    init_parameters(model, seed)
    model.eval()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Grid-level forward


def gather_condition_arrays(config: DenoiserConfig, conditions) -> list[np.ndarray]:
    """Condition grids in config channel order, as float arrays.

    ``conditions`` is either a ConditionSet-like object with attributes
    named after the channels, or a mapping from channel name to grid.
    """
    arrays = []
    for name in config.condition_channels:
        if isinstance(conditions, dict):
            grid = conditions.get(name)
        else:
            grid = getattr(conditions, name, None)
        if grid is None:
            raise DataError(f"condition channel {name!r} not provided")
        arrays.append(grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid))
    return arrays


def forward(model: DenoiserModel, x_t: VoxelGrid, conditions, t: int) -> VoxelGrid:
    """Evaluate f(x_t, C, t) on grids; conditions become input channels."""
    if t < 1:
        raise DataError(f"timestep must be >= 1, got {t}")
    cond_arrays = gather_condition_arrays(model.config, conditions)
    for arr in cond_arrays:
        if arr.shape != x_t.dims:
            raise GeometryMismatchError(
                f"condition shape {arr.shape} does not match grid dims {x_t.dims}"
            )
    stacked = np.stack([x_t.data] + [a.astype(np.float32) for a in cond_arrays])
    batch = torch.from_numpy(stacked[None])
    with torch.no_grad():
        out = model(batch, torch.tensor([t]))
    from . import volume

    return volume.grid_like(x_t, out[0, 0].numpy())
