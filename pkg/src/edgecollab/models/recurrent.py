"""Recurrent edge network: one shared module applied across shrinking scales.

The encoder (one plain conv + two residual blocks + a width projection) runs
once at full resolution; a single residual module is then applied T times,
with 2x max-pooling between applications, so the same parameters process the
image at T successively coarser scales. Decode branches and the fusion are
shared across steps as well, which makes the total parameter count
independent of T.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import (
    DecodeBranch,
    ResidualBlock,
    SideOutputs,
    TiedFusion,
    bidirectional_aggregate,
    image_to_tensor,
    init_conv_parameters,
    init_tied_fusion,
    upsample_to,
)
from .params import ModelParams

KIND = "recurrent"


@dataclass(frozen=True)
class RecurrentConfig:
    steps: int = 5
    encoder_channels: int = 32
    recurrent_channels: int = 72
    decoder_channels: int = 16

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        if min(self.encoder_channels, self.recurrent_channels, self.decoder_channels) <= 0:
            raise ValueError("channel counts must be positive")


class RecurrentEdgeNet(nn.Module):
    def __init__(self, config: RecurrentConfig | None = None):
        super().__init__()
        self.config = config or RecurrentConfig()
        enc = self.config.encoder_channels
        rec = self.config.recurrent_channels
        dec = self.config.decoder_channels
        self.stem = nn.Conv2d(3, enc, 3, padding=1)
        self.enc_block1 = ResidualBlock(enc, enc)
        self.enc_block2 = ResidualBlock(enc, enc)
        self.widen = nn.Conv2d(enc, rec, 1)
        self.recurrent = ResidualBlock(rec, rec)
        self.branch_f2c = DecodeBranch(rec, dec)
        self.branch_c2f = DecodeBranch(rec, dec)
        self.fusion = TiedFusion()

    def init_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        init_conv_parameters(self, g)
        init_tied_fusion(self.fusion, self.config.steps, g)

    def forward(self, image) -> SideOutputs:
        p = next(self.parameters())
        x = image_to_tensor(image, p.dtype, p.device)
        out_size = tuple(x.shape[-2:])

        f = F.relu(self.stem(x))
        f = self.enc_block1(f)
        f = self.enc_block2(f)
        f = F.relu(self.widen(f))

        features = []
        for t in range(self.config.steps):
            if t > 0:
                f = F.max_pool2d(f, 2, ceil_mode=True)
            f = self.recurrent(f)
            features.append(f)

        raw_f2c = [self.branch_f2c(f) for f in features]
        raw_c2f = [self.branch_c2f(f) for f in features]
        f2c, c2f = bidirectional_aggregate(raw_f2c, raw_c2f)
        f2c_up = upsample_to(f2c, out_size)
        c2f_up = upsample_to(c2f, out_size)
        fused_logit = self.fusion(f2c_up, c2f_up)
        fused = torch.sigmoid(fused_logit)

        squeeze = lambda m: m[0, 0]
        return SideOutputs(
            f2c=[squeeze(m) for m in f2c_up],
            c2f=[squeeze(m) for m in c2f_up],
            fused=squeeze(fused),
            fused_logit=squeeze(fused_logit),
            features=[f[0] for f in features],
        )


def build_recurrent(config: RecurrentConfig | None = None, seed: int = 0) -> ModelParams:
    """Deterministically initialized parameters for a recurrent network."""
    net = RecurrentEdgeNet(config)
    net.init_parameters(seed)
    return ModelParams.from_module(KIND, asdict(net.config), net)


def recurrent_from_params(params: ModelParams) -> RecurrentEdgeNet:
    net = RecurrentEdgeNet(RecurrentConfig(**params.config))
    params.load_into(net)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def forward_recurrent(params: ModelParams, image) -> SideOutputs:
    """Functional forward pass; deterministic for fixed (params, image)."""
    return recurrent_from_params(params)(image)
