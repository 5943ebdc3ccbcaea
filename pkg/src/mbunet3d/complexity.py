"""Analytic parameter and FLOP accounting with exact reconciliation against
instantiated models.

Counting conventions (fixed so totals are comparable across models):

* one multiply-accumulate counts as 2 FLOPs;
* convolution FLOPs are output-shape based:
  ``2 * kh*kw*kd * (C_in/g) * C_out * h*w*d``;
* convolution parameters are ``kh*kw*kd * (C_in/g) * C_out`` plus ``C_out``
  when the layer has a bias;
* bias additions, normalization, activations, softmax, upsampling, channel
  shuffling, residual additions and the scalar branch weighting contribute
  zero FLOPs;
* normalization scale/shift parameters and the branch-weight scalars DO count
  toward the parameter total, since they are stored in checkpoints.

The adaptive dilated layer is costed as its three branch convolutions (they
all execute) plus the 3 scalar weights.
"""

import json
from dataclasses import dataclass, field

import torch.nn as nn

from .attention import ChannelExcitation3D, SpatialExcitation3D
from .blocks import AdaptiveDilatedConv3d, MultiBranchResBlock
from .network import MultiBranchUNet3D, NetworkConfig


@dataclass(frozen=True)
class ConvSpec:
    """Descriptor of one convolution, for analytic costing."""
    kernel: tuple
    in_channels: int
    out_channels: int
    stride: tuple = (1, 1, 1)
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if len(self.kernel) != 3 or any(k < 1 for k in self.kernel):
            raise ValueError(f"kernel must be three extents >= 1, got {self.kernel}")
        if any(s < 1 for s in self.stride):
            raise ValueError(f"stride extents must be >= 1, got {self.stride}")
        if self.dilation < 1 or self.groups < 1:
            raise ValueError("dilation and groups must be >= 1")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) must be "
                f"divisible by groups={self.groups}")


def conv_params(spec: ConvSpec) -> int:
    """kh*kw*kd * (C_in/g) * C_out, plus C_out for a bias."""
    kh, kw, kd = spec.kernel
    n = kh * kw * kd * (spec.in_channels // spec.groups) * spec.out_channels
    if spec.has_bias:
        n += spec.out_channels
    return n


def conv_flops(spec: ConvSpec, out_shape) -> int:
    """2 * kh*kw*kd * (C_in/g) * C_out * h*w*d for an (h, w, d) output."""
    h, w, d = out_shape
    kh, kw, kd = spec.kernel
    return 2 * kh * kw * kd * (spec.in_channels // spec.groups) * spec.out_channels * h * w * d


def grouping_reduction_check(c_in: int, c_mid: int, c_out: int, groups: int):
    """(ungrouped, grouped) parameter counts of a two-stage 3x3x3 core.

    The grouped count is accumulated branch by branch (g branches, each
    mapping C_in/g -> C_mid/g -> C_out/g), never by dividing the ungrouped
    count, so ``grouped * g == ungrouped`` is a genuine cross-check.
    """
    if any(c % groups for c in (c_in, c_mid, c_out)):
        raise ValueError(
            f"channels ({c_in}, {c_mid}, {c_out}) must be divisible by groups={groups}")
    ungrouped = 27 * (c_in * c_mid + c_mid * c_out)
    grouped = 0
    for _ in range(groups):
        grouped += 27 * ((c_in // groups) * (c_mid // groups)
                         + (c_mid // groups) * (c_out // groups))
    return ungrouped, grouped


@dataclass
class LayerCost:
    name: str
    kind: str            # "conv" | "norm" | "branch_weights"
    params: int          # analytic count
    enumerated_params: int  # tensor-element count of the instantiated layer
    flops: int
    out_shape: tuple | None = None

    @property
    def reconciled(self) -> bool:
        return self.params == self.enumerated_params


@dataclass
class ComplexityReport:
    input_shape: tuple
    per_layer: list = field(default_factory=list)
    total_params: int = 0
    total_flops: int = 0
    reconciled: bool = False
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "params_millions": self.total_params / 1e6,
            "flops_giga": self.total_flops / 1e9,
            "reconciled": self.reconciled,
            "config": self.config,
            "per_layer": [
                {
                    "name": lc.name,
                    "kind": lc.kind,
                    "params": lc.params,
                    "enumerated_params": lc.enumerated_params,
                    "flops": lc.flops,
                    "out_shape": list(lc.out_shape) if lc.out_shape else None,
                }
                for lc in self.per_layer
            ],
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def format_table(self) -> str:
        lines = [
            f"{'layer':<58}{'kind':<16}{'params':>12}{'flops':>16}  out_shape",
            "-" * 116,
        ]
        for lc in self.per_layer:
            shape = "x".join(str(s) for s in lc.out_shape) if lc.out_shape else "-"
            lines.append(
                f"{lc.name:<58}{lc.kind:<16}{lc.params:>12}{lc.flops:>16}  {shape}")
        lines.append("-" * 116)
        lines.append(
            f"{'TOTAL':<58}{'':<16}{self.total_params:>12}{self.total_flops:>16}")
        lines.append(
            f"params = {self.total_params / 1e6:.3f} M   "
            f"flops = {self.total_flops / 1e9:.3f} G   "
            f"reconciled = {self.reconciled}")
        widths = self.config.get("stage_widths")
        if widths is not None:
            lines.append(
                f"stem_width = {self.config.get('stem_width')}   "
                f"stage_widths = {widths}   block_layout = {self.config.get('block_layout')}")
        return "\n".join(lines)


def _conv_spec_of(module: nn.Conv3d) -> ConvSpec:
    return ConvSpec(
        kernel=tuple(module.kernel_size),
        in_channels=module.in_channels,
        out_channels=module.out_channels,
        stride=tuple(module.stride),
        dilation=module.dilation[0],
        groups=module.groups,
        has_bias=module.bias is not None,
    )


def conv_output_shape(module: nn.Conv3d, in_shape) -> tuple:
    """Spatial output extents of a Conv3d for a given spatial input."""
    out = []
    for i in range(3):
        k, s = module.kernel_size[i], module.stride[i]
        p, d = module.padding[i], module.dilation[i]
        out.append((in_shape[i] + 2 * p - d * (k - 1) - 1) // s + 1)
    return tuple(out)


def _walk_block_shapes(block: MultiBranchResBlock, in_shape, record):
    record(block.conv_in, in_shape)
    main = block.conv1
    if isinstance(main, AdaptiveDilatedConv3d):
        mid_shape = conv_output_shape(main.branches[0], in_shape)
        for branch in main.branches:
            record(branch, mid_shape)
    else:
        mid_shape = conv_output_shape(main, in_shape)
        record(main, mid_shape)
    record(block.conv2, mid_shape)
    record(block.conv_out, mid_shape)
    if isinstance(block.shortcut, nn.Conv3d):
        record(block.shortcut, mid_shape)
    return mid_shape


def _walk_attention_shapes(attention: nn.Module, spatial, record):
    for m in attention.modules():
        if isinstance(m, ChannelExcitation3D):
            record(m.fc1, (1, 1, 1))
            record(m.fc2, (1, 1, 1))
        elif isinstance(m, SpatialExcitation3D):
            record(m.proj, spatial)


def propagate_shapes(model: MultiBranchUNet3D, input_shape) -> dict:
    """Per-convolution spatial output shapes for a given input, keyed by
    module identity.  Mirrors the transforms the forward pass applies."""
    shapes = {}

    def record(module, shape):
        shapes[id(module)] = tuple(int(s) for s in shape)

    spatial = tuple(int(s) for s in input_shape)
    _walk_attention_shapes(model.input_attention, spatial, record)
    spatial = conv_output_shape(model.stem, spatial)
    record(model.stem, spatial)
    for stage in model.encoder:
        for block in stage:
            spatial = _walk_block_shapes(block, spatial, record)
    for level in model.decoder:
        spatial = tuple(2 * s for s in spatial)
        record(level["decode"][0], spatial)
        spatial = _walk_block_shapes(level["block"], spatial, record)
    spatial = tuple(2 * s for s in spatial)
    record(model.fusion, spatial)
    return shapes


def model_complexity(cfg: NetworkConfig, input_shape=(128, 128, 128)) -> ComplexityReport:
    """Cost the network a given config builds, layer by layer.

    The network is instantiated and its graph walked with analytic shape
    propagation; analytic parameter counts (from layer hyperparameters) are
    reconciled against the element counts of the instantiated tensors.
    """
    if len(input_shape) != 3 or any(s < 1 for s in input_shape):
        raise ValueError(f"input_shape must be three positive extents, got {input_shape}")
    divisor = cfg.spatial_divisor
    if any(s % divisor for s in input_shape):
        raise ValueError(
            f"input shape {tuple(input_shape)} must be divisible by {divisor} per axis")

    model = MultiBranchUNet3D(cfg)
    out_shapes = propagate_shapes(model, input_shape)

    per_layer = []
    for name, module in model.named_modules():
        direct = [p for _, p in module.named_parameters(recurse=False)]
        direct += [b for _, b in module.named_buffers(recurse=False)]
        enumerated = sum(int(t.numel()) for t in direct)
        if isinstance(module, nn.Conv3d):
            if id(module) not in out_shapes:
                raise RuntimeError(f"shape propagation missed layer {name!r}")
            spec = _conv_spec_of(module)
            per_layer.append(LayerCost(
                name=name, kind="conv",
                params=conv_params(spec),
                enumerated_params=enumerated,
                flops=conv_flops(spec, out_shapes[id(module)]),
                out_shape=out_shapes[id(module)],
            ))
        elif isinstance(module, nn.GroupNorm):
            analytic = 2 * module.num_channels if module.affine else 0
            per_layer.append(LayerCost(
                name=name, kind="norm",
                params=analytic, enumerated_params=enumerated, flops=0,
            ))
        elif isinstance(module, AdaptiveDilatedConv3d) and enumerated:
            # the three scalar branch weights; the branch convs are separate leaves
            per_layer.append(LayerCost(
                name=f"{name}.branch_weights", kind="branch_weights",
                params=3, enumerated_params=enumerated, flops=0,
            ))
        elif enumerated:
            per_layer.append(LayerCost(
                name=name, kind="unknown",
                params=-1, enumerated_params=enumerated, flops=0,
            ))

    total_params = sum(lc.params for lc in per_layer)
    total_flops = sum(lc.flops for lc in per_layer)
    reconciled = all(lc.reconciled for lc in per_layer)
    config = dict(cfg.to_dict())

    return ComplexityReport(
        input_shape=tuple(input_shape),
        per_layer=per_layer,
        total_params=total_params,
        total_flops=total_flops,
        reconciled=reconciled,
        config=config,
    )
