"""Multibranch grouped residual blocks and the adaptive weighted dilated convolution."""

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_GROUPS = 8
WEIGHT_MODES = ("learnable", "fixed_equal", "disabled")
BRANCH_DILATIONS = (1, 2, 3)


def make_norm(channels: int) -> nn.GroupNorm:
    groups = NORM_GROUPS
    while channels % groups:  # group count must divide the channel count
        groups //= 2
    return nn.GroupNorm(groups, channels)


class AdaptiveDilatedConv3d(nn.Module):
    """Weighted sum of three parallel grouped 3x3x3 convolutions with dilation
    rates 1, 2 and 3.

    Each branch is zero-padded by its dilation rate, so spatial size is
    preserved at stride 1 and every branch produces the same shape. The branch
    outputs are combined as ``w1*y1 + w2*y2 + w3*y3``; all weights start at 1.0
    so the branches have equal impact initially.

    weight_mode:
      * ``learnable``   -- w1..w3 are trainable scalars
      * ``fixed_equal`` -- w1..w3 stay frozen at 1.0
      * ``disabled``    -- only the dilation-1 branch exists; the layer is a
        plain grouped convolution
    """

    def __init__(self, in_channels, out_channels, groups=1, stride=1,
                 weight_mode="learnable"):
        super().__init__()
        if weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {weight_mode!r}")
        if in_channels % groups or out_channels % groups:
            raise ValueError(
                f"channels ({in_channels}, {out_channels}) must be divisible by groups={groups}")
        self.weight_mode = weight_mode
        dilations = (1,) if weight_mode == "disabled" else BRANCH_DILATIONS
        self.branches = nn.ModuleList(
            nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=d,
                      dilation=d, groups=groups, bias=False)
            for d in dilations
        )
        if weight_mode == "learnable":
            self.branch_weights = nn.Parameter(torch.ones(3))
        elif weight_mode == "fixed_equal":
            self.register_buffer("branch_weights", torch.ones(3))

    def forward(self, x):
        if self.weight_mode == "disabled":
            return self.branches[0](x)
        w = self.branch_weights
        out = w[0] * self.branches[0](x)
        for wi, branch in zip(w[1:], self.branches[1:]):
            out = out + wi * branch(x)
        return out


class MultiBranchResBlock(nn.Module):
    """Pre-activation residual unit with a grouped two-stage core.

    Pipeline: 1x1x1 route-in conv, two grouped 3x3x3 stages, 1x1x1 route-out
    conv, each preceded by GroupNorm + ReLU.  The shortcut wraps the whole
    unit; when the channel count or resolution changes it becomes a 1x1x1
    projection with matching stride.  ``downsample`` puts stride 2 on the first
    3x3x3 stage (and the shortcut), halving each spatial dim with ceiling
    rounding.
    """

    def __init__(self, in_channels, out_channels, groups=8, downsample=False,
                 mid_channels=None):
        super().__init__()
        mid = out_channels if mid_channels is None else mid_channels
        for c in (in_channels, mid, out_channels):
            if c % groups:
                raise ValueError(f"channel count {c} not divisible by groups={groups}")
        stride = 2 if downsample else 1
        self.norm_in = make_norm(in_channels)
        self.conv_in = nn.Conv3d(in_channels, mid, 1, bias=False)
        self.norm1 = make_norm(mid)
        self.conv1 = self._main_stage(mid, groups, stride)
        self.norm2 = make_norm(mid)
        self.conv2 = nn.Conv3d(mid, mid, 3, padding=1, groups=groups, bias=False)
        self.norm_out = make_norm(mid)
        self.conv_out = nn.Conv3d(mid, out_channels, 1, bias=False)
        if downsample or in_channels != out_channels:
            self.shortcut = nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False)
        else:
            self.shortcut = nn.Identity()

    def _main_stage(self, mid, groups, stride):
        return nn.Conv3d(mid, mid, 3, stride=stride, padding=1, groups=groups, bias=False)

    def forward(self, x):
        h = self.conv_in(F.relu(self.norm_in(x)))
        h = self.conv1(F.relu(self.norm1(h)))
        h = self.conv2(F.relu(self.norm2(h)))
        h = self.conv_out(F.relu(self.norm_out(h)))
        return h + self.shortcut(x)


class MultiBranchDilatedResBlock(MultiBranchResBlock):
    """Encoder variant whose first grouped stage is the adaptive dilated layer.

    With ``weight_mode="disabled"`` the block degenerates to a plain
    :class:`MultiBranchResBlock` (single dilation-1 stage).
    """

    def __init__(self, in_channels, out_channels, groups=8, downsample=False,
                 weight_mode="learnable", mid_channels=None):
        self._weight_mode = weight_mode
        super().__init__(in_channels, out_channels, groups=groups,
                         downsample=downsample, mid_channels=mid_channels)

    def _main_stage(self, mid, groups, stride):
        return AdaptiveDilatedConv3d(mid, mid, groups=groups, stride=stride,
                                     weight_mode=self._weight_mode)

    @property
    def weight_mode(self):
        return self._weight_mode

    @property
    def branch_weights(self):
        return self.conv1.branch_weights
