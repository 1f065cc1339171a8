"""Translation registration: ShiftNet, differentiable shifting, registered loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

log = logging.getLogger(__name__)

DEFAULT_SHIFT_BOUND = 8.0


@dataclass(frozen=True)
class Shift:
    dx: float
    dy: float

    def __post_init__(self):
        if not (np.isfinite(self.dx) and np.isfinite(self.dy)):
            raise ValueError("shift must be finite")

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Shift":
        dx, dy = t.detach().reshape(-1)[:2].tolist()
        return cls(dx, dy)

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([self.dx, self.dy], dtype=dtype)


def _interp_axis(x: torch.Tensor, d: torch.Tensor, axis: int) -> torch.Tensor:
    """Linear interpolation of ``x`` (shape [B, C, H, W]) displaced by ``d`` [B]."""
    n = x.shape[axis]
    pos = torch.arange(n, dtype=x.dtype, device=x.device)[None, :] - d[:, None]
    base = torch.floor(pos).detach()
    frac = pos - base
    i0 = base.clamp(0, n - 1).long()
    i1 = (base + 1).clamp(0, n - 1).long()
    B, C, H, W = x.shape
    if axis == 3:
        idx0 = i0[:, None, None, :].expand(B, C, H, W)
        idx1 = i1[:, None, None, :].expand(B, C, H, W)
        f = frac[:, None, None, :]
    else:
        idx0 = i0[:, None, :, None].expand(B, C, H, W)
        idx1 = i1[:, None, :, None].expand(B, C, H, W)
        f = frac[:, None, :, None]
    return (1 - f) * x.gather(axis, idx0) + f * x.gather(axis, idx1)


def apply_shift(image: torch.Tensor, shift) -> torch.Tensor:
    """Translate ``image`` by ``(dx, dy)`` pixels with bilinear resampling.

    ``output[y, x] = image[y - dy, x - dx]``; samples falling outside the frame
    take the nearest edge value. Accepts [C, H, W] with a single shift or
    [B, C, H, W] with shifts of shape [B, 2]. Differentiable in both arguments.
    """
    if isinstance(shift, Shift):
        shift = shift.as_tensor(image.dtype)
    shift = torch.as_tensor(shift, dtype=image.dtype, device=image.device)
    single = image.dim() == 3
    x = image[None] if single else image
    s = shift.reshape(-1, 2).expand(x.shape[0], 2) if shift.numel() == 2 else shift
    if not torch.all(torch.isfinite(s)):
        raise ValueError("shift must be finite")
    out = _interp_axis(x, s[:, 0], 3)
    out = _interp_axis(out, s[:, 1], 2)
    return out[0] if single else out


class ShiftNet(nn.Module):
    """Regresses the translation of ``b`` relative to ``a``.

    Eight 3x3 conv blocks (conv, GroupNorm, LeakyReLU; stride 2 on every
    second one), global average pool, two linear layers. The raw head ``g``
    is antisymmetrized, ``(g(a, b) - g(b, a)) / 2``, so identical inputs give
    exactly zero shift.
    Inputs are standardized per channel, which makes the estimate invariant to
    a shared positive affine intensity change.
    """

    def __init__(self, in_bands: int = 3, width: int = 64, fc_width: int = 256, shift_bound: float = DEFAULT_SHIFT_BOUND):
        super().__init__()
        self.in_bands = in_bands
        self.shift_bound = float(shift_bound)
        chans = [2 * in_bands] + [width] * 4 + [2 * width] * 4
        layers = []
        for i in range(8):
            layers += [
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=2 if i % 2 else 1, padding=1),
                nn.GroupNorm(4 if chans[i + 1] % 4 == 0 else 1, chans[i + 1]),
                nn.LeakyReLU(0.1),
            ]
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Linear(2 * width, fc_width), nn.LeakyReLU(0.1), nn.Linear(fc_width, 2))

    @staticmethod
    def _standardize(x):
        mu = x.mean(dim=(-2, -1), keepdim=True)
        sd = x.std(dim=(-2, -1), keepdim=True)
        return (x - mu) / (sd + 1e-6)

    def _raw(self, a, b):
        z = self.features(torch.cat([a, b], dim=1))
        return self.head(z.mean(dim=(-2, -1)))

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        a, b = self._standardize(a), self._standardize(b)
        raw = 0.5 * (self._raw(a, b) - self._raw(b, a))
        return self.shift_bound * torch.tanh(raw / self.shift_bound)


MIN_REGISTRATION_SIZE = 8


def estimate_shift(image_a: torch.Tensor, image_b: torch.Tensor, shiftnet: ShiftNet) -> torch.Tensor:
    """Displacement ``(dx, dy)`` of ``image_b`` relative to ``image_a``.

    So ``apply_shift(image_b, -estimate)`` lines ``image_b`` up with ``image_a``.
    Returns shape [2] for [C, H, W] inputs and [B, 2] for batches.
    """
    if image_a.shape != image_b.shape:
        raise ValueError(f"shape mismatch {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    if min(image_a.shape[-2:]) < MIN_REGISTRATION_SIZE:
        raise ValueError(f"images must be at least {MIN_REGISTRATION_SIZE} px per side")
    single = image_a.dim() == 3
    a = image_a[None] if single else image_a
    b = image_b[None] if single else image_b
    d = shiftnet(a, b)
    return d[0] if single else d


def registered_loss(sr: torch.Tensor, hr: torch.Tensor, base_loss: Callable, shiftnet: ShiftNet) -> torch.Tensor:
    """``base_loss`` after moving ``sr`` onto ``hr`` with the ShiftNet estimate."""
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch {tuple(sr.shape)} vs {tuple(hr.shape)}")
    d = estimate_shift(hr, sr, shiftnet)
    return base_loss(apply_shift(sr, -d), hr)


# --- training on synthetic pairs ---------------------------------------------------


def synthetic_shift_pairs(rng: np.random.Generator, n: int, size: int = 32, bands: int = 3, max_shift: float = 2.0, noise: float = 0.01, affine: bool = True, s: int = 2):
    """``n`` (a, b, shift) triples where ``b`` is ``a`` translated by ``shift``.

    Content comes from fresh synthetic HR scenes; the translation uses cubic
    spline interpolation, independent of the bilinear :func:`apply_shift`.
    """
    from .data import DegradationSpec, generate_synthetic_scene

    pad = int(np.ceil(max_shift)) + 4
    big = size + 2 * pad
    a_out = np.empty((n, bands, size, size), np.float32)
    b_out = np.empty_like(a_out)
    d_out = rng.uniform(-max_shift, max_shift, size=(n, 2)).astype(np.float32)
    seeds = rng.integers(0, 2**31, size=n)
    for i in range(n):
        scene = generate_synthetic_scene(int(seeds[i]), 1, bands, (big, big), s, DegradationSpec.identity())
        hr = scene.hr_reference.pixels.astype(np.float64)
        if rng.random() < 0.5:
            hr = ndimage.gaussian_filter(hr, (0, 0.7, 0.7))
        dx, dy = d_out[i]
        moved = ndimage.shift(hr, (0, dy, dx), order=3, mode="nearest")
        a = hr[:, pad:-pad, pad:-pad] + rng.normal(0, noise, (bands, size, size))
        b = moved[:, pad:-pad, pad:-pad] + rng.normal(0, noise, (bands, size, size))
        if affine:
            gain = rng.uniform(0.7, 1.4, size=(bands, 1, 1))
            b = gain * b + rng.uniform(-0.1, 0.1, size=(bands, 1, 1))
        a_out[i], b_out[i] = a, b
    return a_out, b_out, d_out


def train_shiftnet(shiftnet: ShiftNet, steps: int = 800, batch: int = 32, lr: float = 2e-3, seed: int = 0, size: int = 32, max_shift: float = 2.5, pool: int = 2048, log_every: int = 250) -> list:
    """Supervised pre-training on synthetic translated pairs (L1 on the shift)."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    a_np, b_np, d_np = synthetic_shift_pairs(rng, pool, size, shiftnet.in_bands, max_shift)
    a_all, b_all, d_all = map(torch.from_numpy, (a_np, b_np, d_np))
    opt = torch.optim.Adam(shiftnet.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    history = []
    shiftnet.train()
    for step in range(steps):
        idx = torch.from_numpy(rng.integers(0, pool, size=batch))
        a, b, d = a_all[idx], b_all[idx], d_all[idx]
        if rng.random() < 0.5:  # transpose both images, swapping dx and dy
            a, b = a.transpose(-1, -2), b.transpose(-1, -2)
            d = d.flip(-1)
        pred = shiftnet(a, b)
        loss = F.l1_loss(pred, d)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("shiftnet step %d: l1 %.4f", step + 1, np.mean(history[-log_every:]))
    shiftnet.eval()
    return history
