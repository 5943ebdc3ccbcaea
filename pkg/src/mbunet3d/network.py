"""Encoder-decoder assembly of the multibranch blocks, plus checkpoint I/O."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionConfig, build_attention
from .blocks import (WEIGHT_MODES, MultiBranchDilatedResBlock,
                     MultiBranchResBlock, make_norm)

LABEL_VALUES = (0, 1, 2, 4)
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    in_modalities: int = 4
    num_classes: int = 4
    groups: int = 8
    stem_width: int = 32
    stage_widths: tuple = (48, 128, 320)
    block_layout: tuple = (2, 2, 2)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    weight_mode: str = "learnable"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.block_layout = tuple(int(n) for n in self.block_layout)
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if len(self.stage_widths) != len(self.block_layout):
            raise ValueError("stage_widths and block_layout must have equal length")
        if sum(self.block_layout) != 6:
            raise ValueError("block_layout must place exactly 6 encoder blocks")
        if any(n < 1 for n in self.block_layout):
            raise ValueError("every encoder stage needs at least one block")
        for w in (self.stem_width, *self.stage_widths):
            if w % self.groups or w % 2:
                raise ValueError(
                    f"width {w} must be even and divisible by groups={self.groups}")
        if self.in_modalities % 2:
            raise ValueError("in_modalities must be even (channel split)")

    @property
    def spatial_divisor(self) -> int:
        # stem halving plus one halving per encoder stage
        return 2 ** (1 + len(self.stage_widths))

    def to_dict(self) -> dict:
        return {
            "in_modalities": self.in_modalities,
            "num_classes": self.num_classes,
            "groups": self.groups,
            "stem_width": self.stem_width,
            "stage_widths": list(self.stage_widths),
            "block_layout": list(self.block_layout),
            "attention": {
                "variant": self.attention.variant,
                "reduction_ratio": self.attention.reduction_ratio,
                "shuffle_groups": self.attention.shuffle_groups,
            },
            "weight_mode": self.weight_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class SegmentationOutput:
    probabilities: np.ndarray   # (num_classes, H, W, D) float32, voxel sums ~1
    predicted_labels: np.ndarray  # (H, W, D) uint8, values from LABEL_VALUES


class MultiBranchUNet3D(nn.Module):
    """Lightweight volumetric segmentation network.

    Structure: attention on the raw input, a stride-2 3x3x3 stem, three
    encoder stages of multibranch dilated residual blocks (six in total, each
    stage entered through a stride-2 block), then a symmetric decoder that at
    each level trilinearly upsamples, concatenates the skip feature, applies a
    1x1x1 decode conv + norm + ReLU and a plain multibranch residual block.  A
    final trilinear upsample restores the input resolution before the 1x1x1
    fusion conv and the per-voxel softmax.
    """

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        cfg = config if config is not None else NetworkConfig()
        self.config = cfg
        self.input_attention = build_attention(cfg.attention, cfg.in_modalities)
        self.stem = nn.Conv3d(cfg.in_modalities, cfg.stem_width, 3, stride=2,
                              padding=1, bias=False)

        stages = []
        prev = cfg.stem_width
        for width, n_blocks in zip(cfg.stage_widths, cfg.block_layout):
            blocks = [MultiBranchDilatedResBlock(
                prev, width, groups=cfg.groups, downsample=True,
                weight_mode=cfg.weight_mode)]
            blocks += [
                MultiBranchDilatedResBlock(width, width, groups=cfg.groups,
                                           weight_mode=cfg.weight_mode)
                for _ in range(n_blocks - 1)
            ]
            stages.append(nn.Sequential(*blocks))
            prev = width
        self.encoder = nn.ModuleList(stages)

        skip_widths = (cfg.stem_width, *cfg.stage_widths[:-1])
        levels = []
        up_width = cfg.stage_widths[-1]
        for width in reversed(skip_widths):
            levels.append(nn.ModuleDict({
                "decode": nn.Sequential(
                    nn.Conv3d(up_width + width, width, 1, bias=False),
                    make_norm(width),
                    nn.ReLU(inplace=True),
                ),
                "block": MultiBranchResBlock(width, width, groups=cfg.groups),
            }))
            up_width = width
        self.decoder = nn.ModuleList(levels)
        self.fusion = nn.Conv3d(cfg.stem_width, cfg.num_classes, 1)

    @property
    def dilated_blocks(self):
        """The six encoder blocks in forward order."""
        return [block for stage in self.encoder for block in stage]

    def forward(self, x):
        if x.ndim != 5:
            raise ValueError(f"expected a (N, C, H, W, D) tensor, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.in_modalities:
            raise ValueError(
                f"expected {self.config.in_modalities} input channels, got {x.shape[1]}")
        divisor = self.config.spatial_divisor
        if any(s % divisor for s in x.shape[2:]):
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must each be divisible by {divisor}")

        x = self.input_attention(x)
        f = self.stem(x)
        skips = [f]
        for stage in self.encoder:
            f = stage(f)
            skips.append(f)
        skips.pop()  # bottom feature feeds the decoder directly
        for level in self.decoder:
            f = F.interpolate(f, scale_factor=2, mode="trilinear", align_corners=False)
            f = torch.cat([f, skips.pop()], dim=1)
            f = level["decode"](f)
            f = level["block"](f)
        f = F.interpolate(f, scale_factor=2, mode="trilinear", align_corners=False)
        return torch.softmax(self.fusion(f), dim=1)


def predict_volume(model: MultiBranchUNet3D, volume) -> SegmentationOutput:
    """Inference on a single unbatched (C, H, W, D) volume."""
    arr = torch.as_tensor(np.asarray(volume), dtype=torch.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected a (C, H, W, D) volume, got shape {tuple(arr.shape)}")
    model.eval()
    with torch.no_grad():
        probs = model(arr.unsqueeze(0))[0]
    probs_np = probs.numpy()
    labels = np.asarray(LABEL_VALUES, dtype=np.uint8)[probs_np.argmax(axis=0)]
    return SegmentationOutput(probabilities=probs_np, predicted_labels=labels)


def collect_branch_weights(model: MultiBranchUNet3D):
    """Branch-weight triples ``(block_index, w1, w2, w3)`` in encoder order
    (block_index runs 1..6); empty when adaptive weighting is disabled."""
    if model.config.weight_mode == "disabled":
        return []
    out = []
    for i, block in enumerate(model.dilated_blocks, start=1):
        w = block.branch_weights.detach().cpu()
        out.append((i, float(w[0]), float(w[1]), float(w[2])))
    return out


def save_checkpoint(path, model: MultiBranchUNet3D, step: int = 0) -> Path:
    """Write a single-file archive: config JSON, named little-endian float32
    parameter/buffer arrays, and the training step counter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "step": int(step),
            "config": model.config.to_dict()}
    arrays = {
        "state/" + name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in model.state_dict().items()
    }
    meta_bytes = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=meta_bytes, **arrays)
    return path


def load_checkpoint(path):
    """Rebuild the model recorded in a checkpoint; returns (model, step)."""
    path = Path(path)
    with np.load(path) as data:
        if "__meta__" not in data.files:
            raise ValueError(f"{path}: not a model checkpoint (missing metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = NetworkConfig.from_dict(meta["config"])
        model = MultiBranchUNet3D(cfg)
        state = {
            key[len("state/"):]: torch.from_numpy(data[key].astype(np.float32))
            for key in data.files if key.startswith("state/")
        }
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ValueError(f"{path}: checkpoint incompatible with its recorded config: {exc}") from exc
    return model, int(meta["step"])
