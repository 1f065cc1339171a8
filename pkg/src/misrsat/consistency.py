"""Radiometric consistency: keep the SR output faithful to the LR sensor's colors.

The super-resolved image is tied to the LR reference through a block-average
downsampling MSE, while a 1x1 color-matching head carries it to the HR
sensor's calibration before the (registered) super-resolution loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .highresnet import HighResNet, reference_frame
from .metrics import ssim_loss
from .registration import ShiftNet, registered_loss


@dataclass(frozen=True)
class ConsistencyConfig:
    w_consistency: float = 0.9
    w_sr: float = 0.1
    cm_hidden: int = 64

    def __post_init__(self):
        if self.w_consistency < 0 or self.w_sr < 0 or abs(self.w_consistency + self.w_sr - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")

    def to_dict(self) -> dict:
        return asdict(self)


def block_downsample(sr: torch.Tensor, lr_hw) -> torch.Tensor:
    h, w = lr_hw
    H, W = sr.shape[-2:]
    if H % h or W % w:
        raise ValueError(f"SR dims {H}x{W} are not an integer multiple of {h}x{w}")
    return F.adaptive_avg_pool2d(sr, (h, w))


def consistency_loss(sr: torch.Tensor, lr_ref: torch.Tensor) -> torch.Tensor:
    """MSE between the block-averaged SR image and the LR reference frame."""
    return F.mse_loss(block_downsample(sr, lr_ref.shape[-2:]), lr_ref)


class ColorMatch(nn.Module):
    """Per-pixel map: 1x1 conv -> ReLU -> 1x1 conv."""

    def __init__(self, bands: int = 3, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Conv2d(bands, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, bands, 1))
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.05)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.net(x)


def combined_loss(
    lr_stack: torch.Tensor,
    masks: Optional[torch.Tensor],
    hr: torch.Tensor,
    misr: HighResNet,
    color_match: ColorMatch,
    shiftnet: ShiftNet,
    cfg: ConsistencyConfig = ConsistencyConfig(),
    base_loss=ssim_loss,
    return_parts: bool = False,
):
    sr = misr(lr_stack, masks)
    ref = reference_frame(lr_stack, masks)
    l_cons = consistency_loss(sr, ref)
    l_sr = registered_loss(color_match(sr), hr, base_loss, shiftnet)
    total = cfg.w_consistency * l_cons + cfg.w_sr * l_sr
    if return_parts:
        return total, {"consistency": l_cons.detach(), "sr": l_sr.detach(), "sr_image": sr.detach()}
    return total
