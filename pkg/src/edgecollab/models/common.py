"""Building blocks shared by the two edge-network architectures.

Both networks emit, per scale step, a fine-to-coarse and a coarse-to-fine
side logit map, aggregated bidirectionally across steps and fused into a
single edge-probability map. The aggregation is identical for the two
architectures; what differs is whether the per-step modules share parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import Image


@dataclass
class SideOutputs:
    """One forward pass: per-step side logits plus the fused prediction.

    ``f2c``/``c2f`` hold H x W logit maps (already upsampled to the input
    resolution), ``fused`` is the sigmoid of ``fused_logit`` and lies in
    [0, 1]. ``features`` keeps the per-step feature maps at their native
    scales for introspection.
    """

    f2c: list
    c2f: list
    fused: torch.Tensor
    fused_logit: torch.Tensor
    features: list = field(default_factory=list)

    @property
    def feature_sizes(self) -> list:
        return [tuple(f.shape[-2:]) for f in self.features]


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a skip; 1x1 projection when widths differ."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = F.relu(self.conv1(x))
        h = self.conv2(h)
        return F.relu(self.skip(x) + h)


class DecodeBranch(nn.Module):
    """Feature map -> single-channel side logit map at the same scale."""

    def __init__(self, in_channels: int, mid_channels: int):
        super().__init__()
        self.reduce = nn.Conv2d(in_channels, mid_channels, 3, padding=1)
        self.head = nn.Conv2d(mid_channels, 1, 1)

    def forward(self, x):
        return self.head(F.relu(self.reduce(x)))


class TiedFusion(nn.Module):
    """1x1 fusion with one weight per branch direction, shared across steps.

    Sharing the per-step fusion coefficients keeps the parameter count
    independent of the number of recurrent steps, matching the rest of the
    shared-parameter design.
    """

    def __init__(self):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(2))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, f2c_maps, c2f_maps):
        total_f2c = torch.stack(f2c_maps).sum(dim=0)
        total_c2f = torch.stack(c2f_maps).sum(dim=0)
        return self.weight[0] * total_f2c + self.weight[1] * total_c2f + self.bias


def bidirectional_aggregate(raw_f2c: list, raw_c2f: list) -> tuple[list, list]:
    """Accumulate side maps fine-to-coarse and coarse-to-fine across steps.

    f2c(t) adds the 2x max-pooled f2c(t-1); c2f(t) adds the bilinearly
    upsampled c2f(t+1). The missing neighbours at the two ends are zero maps,
    so the first/last entries pass through unchanged.
    """
    steps = len(raw_f2c)
    f2c: list = []
    for t in range(steps):
        cur = raw_f2c[t]
        if t > 0:
            cur = cur + F.max_pool2d(f2c[t - 1], 2, ceil_mode=True)
        f2c.append(cur)
    c2f: list = [None] * steps
    for t in reversed(range(steps)):
        cur = raw_c2f[t]
        if t < steps - 1:
            cur = cur + F.interpolate(
                c2f[t + 1], size=cur.shape[-2:], mode="bilinear", align_corners=False
            )
        c2f[t] = cur
    return f2c, c2f


def upsample_to(maps: list, size: tuple[int, int]) -> list:
    return [
        m
        if tuple(m.shape[-2:]) == tuple(size)
        else F.interpolate(m, size=size, mode="bilinear", align_corners=False)
        for m in maps
    ]


def image_to_tensor(image, dtype: torch.dtype, device=None) -> torch.Tensor:
    """Accept an Image, an H x W x 3 array, or a (1, 3, H, W) tensor."""
    if isinstance(image, Image):
        arr = image.pixels
    elif isinstance(image, torch.Tensor):
        t = image
        if t.ndim == 3:
            t = t.unsqueeze(0)
        return t.to(dtype=dtype, device=device)
    else:
        arr = np.asarray(image)
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).unsqueeze(0)
    return t.to(dtype=dtype, device=device)


def init_conv_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in normal init for conv weights, zeros for biases.

    Visits submodules in definition order so a fixed seed yields bitwise
    identical parameters.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def init_tied_fusion(fusion: TiedFusion, steps: int, generator: torch.Generator) -> None:
    # effective fan-in of the fused pixel is one map per direction per step
    std = math.sqrt(2.0 / (2 * steps))
    with torch.no_grad():
        fusion.weight.normal_(0.0, std, generator=generator)
        fusion.bias.zero_()
