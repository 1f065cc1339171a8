"""SRResNet single-image baseline (no batch normalization)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .data import Revisit, Scene
from .ingest import rank_revisits


@dataclass(frozen=True)
class SRResNetConfig:
    in_bands: int = 3
    hidden: int = 64
    residual_blocks: int = 16
    sr_factor: int = 2

    def __post_init__(self):
        if self.hidden < 1 or self.residual_blocks < 1:
            raise ValueError("hidden and residual_blocks must be >= 1")
        s = self.sr_factor
        if not (s == 3 or (s >= 2 and s & (s - 1) == 0)):
            raise ValueError("sr_factor must be a power of two or 3")

    def to_dict(self) -> dict:
        return asdict(self)


class _Block(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.PReLU(), nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


def upsample_stages(s: int) -> list:
    return [3] if s == 3 else [2] * (s.bit_length() - 1)


class SRResNet(nn.Module):
    """9x9 stem, residual trunk with a long skip, pixel-shuffle stages, 9x9 output conv."""

    def __init__(self, cfg: SRResNetConfig = SRResNetConfig()):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_bands, h, 9, padding=4), nn.PReLU())
        self.trunk = nn.Sequential(*[_Block(h) for _ in range(cfg.residual_blocks)])
        self.trunk_out = nn.Conv2d(h, h, 3, padding=1)
        ups = []
        for r in upsample_stages(cfg.sr_factor):
            ups += [nn.Conv2d(h, h * r * r, 3, padding=1), nn.PixelShuffle(r), nn.PReLU()]
        self.upsample = nn.Sequential(*ups)
        self.out = nn.Conv2d(h, cfg.in_bands, 9, padding=4)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        single = lr.dim() == 3
        x = lr[None] if single else lr
        if x.shape[1] != self.cfg.in_bands:
            raise ValueError(f"expected {self.cfg.in_bands} bands, got {x.shape[1]}")
        feat = self.stem(x)
        feat = feat + self.trunk_out(self.trunk(feat))
        y = self.out(self.upsample(feat))
        return y[0] if single else y


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """[.., C*r*r, h, w] -> [.., C, r*h, r*w]; out[c, r*i+di, r*j+dj] = x[c*r*r + di*r + dj, i, j]."""
    return nn.functional.pixel_shuffle(x, r)


def select_input(scene: Scene) -> Revisit:
    """The clearest revisit (ties: earliest acquisition)."""
    return scene.revisits[rank_revisits(scene)[0]]
