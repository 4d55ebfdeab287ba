"""Non-recurrent edge network: four stages with their own parameters.

This is the deployed inference architecture. Each stage owns a residual
module and a pair of decode branches; widths grow as the resolution shrinks,
so the cheap high-resolution stages stay light while the semantic low-
resolution stages get the bulk of the capacity. The bidirectional side-output
aggregation is identical to the recurrent network's.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import (
    DecodeBranch,
    ResidualBlock,
    SideOutputs,
    bidirectional_aggregate,
    image_to_tensor,
    init_conv_parameters,
    upsample_to,
)
from .params import ModelParams

KIND = "nonrecurrent"
N_STAGES = 4


@dataclass(frozen=True)
class NonRecurrentConfig:
    # defaults land the deployable model at ~183.5k parameters (~734 KB fp32)
    stage_channels: tuple = (24, 32, 48, 68)
    decoder_channels: int = 16

    def __post_init__(self):
        chans = tuple(int(c) for c in self.stage_channels)
        object.__setattr__(self, "stage_channels", chans)
        if len(chans) != N_STAGES:
            raise ValueError(f"exactly {N_STAGES} stages required, got {len(chans)}")
        if min(chans) <= 0 or self.decoder_channels <= 0:
            raise ValueError("channel counts must be positive")
        if any(b < a for a, b in zip(chans, chans[1:])):
            raise ValueError("stage_channels must be non-decreasing")
        if chans[-1] == chans[0]:
            raise ValueError("stage_channels must increase across at least one step")

    @classmethod
    def large(cls) -> "NonRecurrentConfig":
        """~1.15x wider preset (config-only; accuracy untested here)."""
        return cls(stage_channels=(28, 37, 55, 78), decoder_channels=18)


class NonRecurrentEdgeNet(nn.Module):
    def __init__(self, config: NonRecurrentConfig | None = None):
        super().__init__()
        self.config = config or NonRecurrentConfig()
        dec = self.config.decoder_channels
        widths = self.config.stage_channels
        ins = (3,) + widths[:-1]
        self.stages = nn.ModuleList(
            ResidualBlock(i, o) for i, o in zip(ins, widths)
        )
        self.branches_f2c = nn.ModuleList(DecodeBranch(w, dec) for w in widths)
        self.branches_c2f = nn.ModuleList(DecodeBranch(w, dec) for w in widths)
        self.fusion = nn.Conv2d(2 * N_STAGES, 1, 1)

    def init_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        init_conv_parameters(self, g)

    def stage_parameter_counts(self) -> list:
        """Parameters owned by each stage (module + its two branches)."""
        return [
            sum(p.numel() for p in self.stages[t].parameters())
            + sum(p.numel() for p in self.branches_f2c[t].parameters())
            + sum(p.numel() for p in self.branches_c2f[t].parameters())
            for t in range(N_STAGES)
        ]

    def forward(self, image) -> SideOutputs:
        p = next(self.parameters())
        x = image_to_tensor(image, p.dtype, p.device)
        out_size = tuple(x.shape[-2:])

        features = []
        f = x
        for t, stage in enumerate(self.stages):
            if t > 0:
                f = F.max_pool2d(f, 2, ceil_mode=True)
            f = stage(f)
            features.append(f)

        raw_f2c = [b(f) for b, f in zip(self.branches_f2c, features)]
        raw_c2f = [b(f) for b, f in zip(self.branches_c2f, features)]
        f2c, c2f = bidirectional_aggregate(raw_f2c, raw_c2f)
        f2c_up = upsample_to(f2c, out_size)
        c2f_up = upsample_to(c2f, out_size)
        fused_logit = self.fusion(torch.cat(f2c_up + c2f_up, dim=1))
        fused = torch.sigmoid(fused_logit)

        squeeze = lambda m: m[0, 0]
        return SideOutputs(
            f2c=[squeeze(m) for m in f2c_up],
            c2f=[squeeze(m) for m in c2f_up],
            fused=squeeze(fused),
            fused_logit=squeeze(fused_logit),
            features=[f[0] for f in features],
        )


def build_nonrecurrent(
    config: NonRecurrentConfig | None = None, seed: int = 0
) -> ModelParams:
    """Deterministically initialized parameters for a non-recurrent network."""
    net = NonRecurrentEdgeNet(config)
    net.init_parameters(seed)
    return ModelParams.from_module(KIND, asdict(net.config), net)


def nonrecurrent_from_params(params: ModelParams) -> NonRecurrentEdgeNet:
    cfg = dict(params.config)
    cfg["stage_channels"] = tuple(cfg["stage_channels"])
    net = NonRecurrentEdgeNet(NonRecurrentConfig(**cfg))
    params.load_into(net)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def forward_nonrecurrent(params: ModelParams, image) -> SideOutputs:
    """Functional forward pass; deterministic for fixed (params, image)."""
    return nonrecurrent_from_params(params)(image)
