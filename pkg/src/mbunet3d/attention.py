"""Split channel/spatial attention with residual fusion and channel shuffle."""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ATTENTION_VARIANTS = ("none", "ch_se", "ch_se_plus_sp_se", "saca3d")


@dataclass
class AttentionConfig:
    variant: str = "saca3d"
    reduction_ratio: int = 2
    shuffle_groups: int = 2

    def __post_init__(self):
        if self.variant not in ATTENTION_VARIANTS:
            raise ValueError(
                f"unknown attention variant {self.variant!r}; expected one of {ATTENTION_VARIANTS}")
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")
        if self.shuffle_groups < 1:
            raise ValueError("shuffle_groups must be >= 1")


def channel_split(x):
    """Split a (N, C, H, W, D) tensor into two equal channel halves."""
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"channel_split needs an even channel count, got {c}")
    return x[:, : c // 2], x[:, c // 2:]


def channel_shuffle(x, groups):
    """Transpose permutation of channels across groups; parameter-free.

    The channel at (group i, slot j) moves to (slot j, group i), restoring
    information flow between channel groups.
    """
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"channels={c} not divisible by shuffle groups={groups}")
    spatial = x.shape[2:]
    x = x.reshape(n, groups, c // groups, *spatial)
    return x.transpose(1, 2).reshape(n, c, *spatial)


class ChannelExcitation3D(nn.Module):
    """Squeeze-and-excitation channel gate.

    Global average pool, two-layer bottleneck (channels -> channels/r ->
    channels, ReLU in between), sigmoid, per-channel rescale.  Gate values are
    strictly inside (0, 1) for finite inputs.
    """

    def __init__(self, channels, reduction=2):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction={reduction} must divide channels={channels}")
        hidden = channels // reduction
        self.fc1 = nn.Conv3d(channels, hidden, 1)
        self.fc2 = nn.Conv3d(hidden, channels, 1)

    def forward(self, x):
        g = F.adaptive_avg_pool3d(x, 1)
        g = torch.sigmoid(self.fc2(F.relu(self.fc1(g))))
        return x * g


class SpatialExcitation3D(nn.Module):
    """Spatial gate: 1x1x1 projection to a single-channel sigmoid map that is
    broadcast over every channel."""

    def __init__(self, channels):
        super().__init__()
        self.proj = nn.Conv3d(channels, 1, 1)

    def forward(self, x):
        return x * torch.sigmoid(self.proj(x))


class SplitAttention3D(nn.Module):
    """Channel split -> parallel channel/spatial excitation -> concatenate ->
    residual add of the input -> channel shuffle.

    The split halves the channel count seen by each excitation branch, the
    residual fusion counters the sparsity the parallel gating introduces, and
    the final shuffle mixes the two halves back together.  Output shape always
    equals the input shape.
    """

    def __init__(self, channels, reduction=2, shuffle_groups=2):
        super().__init__()
        if channels % 2:
            raise ValueError(f"channels={channels} must be even for the split")
        if channels % shuffle_groups:
            raise ValueError(
                f"shuffle_groups={shuffle_groups} must divide channels={channels}")
        half = channels // 2
        self.channel_gate = ChannelExcitation3D(half, reduction)
        self.spatial_gate = SpatialExcitation3D(half)
        self.shuffle_groups = shuffle_groups

    def forward(self, x):
        x_c, x_s = channel_split(x)
        fused = torch.cat([self.channel_gate(x_c), self.spatial_gate(x_s)], dim=1) + x
        return channel_shuffle(fused, self.shuffle_groups)


def build_attention(cfg: AttentionConfig, channels: int) -> nn.Module:
    """Instantiate the configured attention variant for a channel count."""
    if cfg.variant == "none":
        return nn.Identity()
    if cfg.variant == "ch_se":
        return ChannelExcitation3D(channels, cfg.reduction_ratio)
    if cfg.variant == "ch_se_plus_sp_se":
        return nn.Sequential(ChannelExcitation3D(channels, cfg.reduction_ratio),
                             SpatialExcitation3D(channels))
    if cfg.variant == "saca3d":
        return SplitAttention3D(channels, cfg.reduction_ratio, cfg.shuffle_groups)
    raise ValueError(f"unknown attention variant {cfg.variant!r}")
