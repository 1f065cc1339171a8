"""HighRes-net: shared-reference encoding, recursive pairwise fusion, learned upsampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class HighResNetConfig:
    in_bands: int = 3
    hidden: int = 64
    enc_residual_blocks: int = 2
    sr_factor: int = 2
    fractional_upsample: Optional[float] = None
    revisit_pad: str = "repeat_last"

    def __post_init__(self):
        if self.hidden < 1 or self.in_bands < 1:
            raise ValueError("hidden and in_bands must be >= 1")
        if self.sr_factor not in (2, 3):
            raise ValueError("sr_factor must be 2 or 3")
        if self.fractional_upsample is not None and not self.fractional_upsample >= 1:
            raise ValueError("fractional_upsample must be >= 1")
        if self.revisit_pad not in ("repeat_last", "repeat_reference"):
            raise ValueError(f"unknown revisit_pad {self.revisit_pad!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    """x + PReLU(conv(PReLU(conv(x)))); one shared slope per PReLU."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size, padding=pad),
            nn.PReLU(),
            nn.Conv2d(channels, channels, kernel_size, padding=pad),
            nn.PReLU(),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    def __init__(self, cfg: HighResNetConfig):
        super().__init__()
        h = cfg.hidden
        self.stem = nn.Sequential(nn.Conv2d(2 * cfg.in_bands, h, 3, padding=1), nn.PReLU())
        self.blocks = nn.Sequential(*[ResidualBlock(h) for _ in range(cfg.enc_residual_blocks)])
        self.out = nn.Conv2d(h, h, 3, padding=1)

    def forward(self, x):
        return self.out(self.blocks(self.stem(x)))


class FusePair(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.block = ResidualBlock(2 * hidden)
        self.out = nn.Sequential(nn.Conv2d(2 * hidden, hidden, 3, padding=1), nn.PReLU())

    def forward(self, pair):
        return self.out(self.block(pair))


def _transpose_padding(s: int, k: int = 3) -> tuple[int, int]:
    # (h-1)*s - 2p + k + op == s*h
    for p in range(k):
        op = s - k + 2 * p
        if 0 <= op < s:
            return p, op
    raise ValueError(f"no exact transpose-conv padding for stride {s}")


class Decoder(nn.Module):
    def __init__(self, cfg: HighResNetConfig):
        super().__init__()
        h, s = cfg.hidden, cfg.sr_factor
        p, op = _transpose_padding(s)
        self.up = nn.ConvTranspose2d(h, h, 3, stride=s, padding=p, output_padding=op)
        self.act = nn.PReLU()
        self.out = nn.Conv2d(h, cfg.in_bands, 1)
        self.fractional = cfg.fractional_upsample

    def forward(self, x):
        y = self.out(self.act(self.up(x)))
        if self.fractional and self.fractional != 1.0:
            y = F.interpolate(y, scale_factor=self.fractional, mode="bicubic", align_corners=False)
        return y


def reference_frame(lr_stack: torch.Tensor, masks: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-pixel median over revisits, skipping cloud-masked values.

    Even counts take the mean of the two middle values. Pixels that are cloudy
    in every revisit fall back to the plain median. ``lr_stack`` is
    [B, T, C, h, w] (or [T, C, h, w]); ``masks`` matches it without C.
    """
    single = lr_stack.dim() == 4
    x = lr_stack[None] if single else lr_stack
    if masks is None:
        m = torch.zeros(x.shape[0], x.shape[1], x.shape[3], x.shape[4], dtype=torch.bool, device=x.device)
    else:
        m = (masks[None] if single else masks).bool()
    B, T, C, h, w = x.shape
    all_cloudy = m.all(dim=1, keepdim=True)
    m = m & ~all_cloudy
    valid = (~m)[:, :, None].expand(B, T, C, h, w)
    n = valid.sum(dim=1, keepdim=True)
    filled = torch.where(valid, x, torch.full_like(x, float("inf")))
    srt, _ = torch.sort(filled, dim=1)
    lo = torch.gather(srt, 1, (n - 1) // 2)
    hi = torch.gather(srt, 1, n // 2)
    ref = 0.5 * (lo + hi)
    ref = ref[:, 0]
    return ref[0] if single else ref


class HighResNet(nn.Module):
    def __init__(self, cfg: HighResNetConfig = HighResNetConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.fuse_pair = FusePair(cfg.hidden)
        self.decoder = Decoder(cfg)

    def encode(self, lr_stack: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        """[B, T, C, h, w] revisits + [B, C, h, w] reference -> [B, T, hidden, h, w]."""
        B, T, C, h, w = lr_stack.shape
        if C != self.cfg.in_bands:
            raise ValueError(f"expected {self.cfg.in_bands} bands, got {C}")
        x = torch.cat([lr_stack, ref[:, None].expand(B, T, C, h, w)], dim=2)
        z = self.encoder(x.reshape(B * T, 2 * C, h, w))
        return z.view(B, T, -1, h, w)

    def pad_encodings(self, z: torch.Tensor, ref_code: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, T = z.shape[:2]
        target = 1 << (T - 1).bit_length()
        if target == T:
            return z
        if self.cfg.revisit_pad == "repeat_reference" and ref_code is not None:
            filler = ref_code[:, None]
        else:
            filler = z[:, -1:]
        return torch.cat([z, filler.expand(B, target - T, *z.shape[2:])], dim=1)

    def fuse(self, z: torch.Tensor, ref_code: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Recursively fuse adjacent pairs of [B, T, hidden, h, w] codes until one remains.

        A single code is paired with its own copy, so FUSE is applied at
        least once.
        """
        if z.shape[1] < 1:
            raise ValueError("need at least one encoding to fuse")
        if z.shape[1] == 1:
            z = torch.cat([z, z], dim=1)
        z = self.pad_encodings(z, ref_code)
        B, T, Hd, h, w = z.shape
        while T > 1:
            pairs = z.reshape(B * T // 2, 2 * Hd, h, w)
            z = self.fuse_pair(pairs).view(B, T // 2, Hd, h, w)
            T //= 2
        return z[:, 0]

    def decode(self, fused: torch.Tensor) -> torch.Tensor:
        return self.decoder(fused)

    def forward(self, lr_stack: torch.Tensor, masks: Optional[torch.Tensor] = None) -> torch.Tensor:
        single = lr_stack.dim() == 4
        x = lr_stack[None] if single else lr_stack
        m = None if masks is None else (masks[None] if single else masks)
        ref = reference_frame(x, m)
        z = self.encode(x, ref)
        ref_code = None
        if self.cfg.revisit_pad == "repeat_reference":
            ref_code = self.encode(ref[:, None], ref)[:, 0]
        sr = self.decode(self.fuse(z, ref_code))
        return sr[0] if single else sr


# --- parameter accounting --------------------------------------------------------


def _conv(cin, cout, k):
    return k * k * cin * cout + cout


def parameter_table(cfg: HighResNetConfig) -> list:
    """(module, layer, count) rows in the order of the architecture table."""
    h, c = cfg.hidden, cfg.in_bands
    rb = lambda ch: 2 * _conv(ch, ch, 3) + 2
    rows = [("encode", f"Conv2d(in={2 * c}, out={h}, k=3)", _conv(2 * c, h, 3)), ("encode", "PReLU", 1)]
    rows += [("encode", f"ResidualBlock({h})", rb(h))] * cfg.enc_residual_blocks
    rows += [
        ("encode", f"Conv2d(in={h}, out={h}, k=3)", _conv(h, h, 3)),
        ("fuse", f"ResidualBlock({2 * h})", rb(2 * h)),
        ("fuse", f"Conv2d(in={2 * h}, out={h}, k=3)", _conv(2 * h, h, 3)),
        ("fuse", "PReLU", 1),
        ("decode", f"ConvTranspose2d(in={h}, out={h}, k=3, s={cfg.sr_factor})", _conv(h, h, 3)),
        ("decode", "PReLU", 1),
        ("decode", f"Conv2d(in={h}, out={c}, k=1)", _conv(h, c, 1)),
    ]
    if cfg.fractional_upsample:
        rows.append(("residual", f"Upsample(scale_factor={cfg.fractional_upsample}, mode='bicubic')", 0))
    return rows


def parameter_count(cfg: HighResNetConfig) -> int:
    return sum(n for _, _, n in parameter_table(cfg))
