"""Image fidelity and spectral diagnostics.

``ssim`` works on numpy arrays in float64; ``ssim_torch``/``ssim_loss`` are the
differentiable twins used as training objectives. Both use the Gaussian
window of Wang et al. (11 taps, sigma 1.5) and valid-mode filtering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

LOG_FLOOR = 1e-12
LOG_FLOOR_DB = -120.0


def psnr(hr, sr, i_max: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    hr = np.asarray(hr, dtype=np.float64)
    sr = np.asarray(sr, dtype=np.float64)
    if hr.shape != sr.shape:
        raise ValueError(f"shape mismatch {hr.shape} vs {sr.shape}")
    if not i_max > 0:
        raise ValueError("i_max must be positive")
    mse = np.mean((hr - sr) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(i_max**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation over the last two axes."""
    k = len(g)
    H, W = img.shape[-2:]
    rows = sum(g[i] * img[..., i : H - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j : W - k + 1 + j] for j in range(k))


def ssim_map(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, dynamic_range=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {window}-tap window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, dynamic_range=1.0) -> float:
    """Mean structural similarity; bands are averaged for [C, H, W] input."""
    return float(np.mean(ssim_map(a, b, window, sigma, k1, k2, dynamic_range)))


def ssim_torch(a: torch.Tensor, b: torch.Tensor, window=11, sigma=1.5, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Per-sample mean SSIM of [B, C, H, W] tensors (differentiable)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {tuple(a.shape[-2:])} smaller than the {window}-tap window")
    B, C, H, W = a.shape
    g = torch.as_tensor(gaussian_window(window, sigma), dtype=a.dtype, device=a.device)
    gy = g.view(1, 1, window, 1).expand(C, 1, window, 1)
    gx = g.view(1, 1, 1, window).expand(C, 1, 1, window)

    def filt(x):
        return F.conv2d(F.conv2d(x, gy, groups=C), gx, groups=C)

    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return smap.flatten(1).mean(dim=1)


def ssim_loss(sr: torch.Tensor, hr: torch.Tensor, **kw) -> torch.Tensor:
    """1 - SSIM averaged over the batch; lies in [0, 2]."""
    return 1.0 - ssim_torch(sr, hr, **kw).mean()


def mse_loss(sr, hr):
    return F.mse_loss(sr, hr)


def mae_loss(sr, hr):
    return F.l1_loss(sr, hr)


LOSSES = {"ssim": ssim_loss, "mse": mse_loss, "mae": mae_loss}


# --- shift-tolerant scoring -------------------------------------------------------


def aligned_scores(hr, sr, max_shift=3.0, step=0.25, border=4, i_max=1.0):
    """PSNR/SSIM after the translation of ``sr`` that maximizes PSNR.

    Different methods come out registered to different revisits, so every
    method is scored at its best sub-pixel alignment (grid search, bilinear
    resampling, ``border`` pixels cropped). Returns ``(psnr, ssim, (dx, dy))``.
    """
    from .registration import apply_shift  # local import keeps metrics torch-light

    hr_t = torch.as_tensor(np.asarray(hr, dtype=np.float64))
    sr_t = torch.as_tensor(np.asarray(sr, dtype=np.float64))
    offsets = np.arange(-max_shift, max_shift + 1e-9, step)
    grid = torch.tensor([(dx, dy) for dy in offsets for dx in offsets], dtype=torch.float64)
    shifted = apply_shift(sr_t.expand(len(grid), *sr_t.shape), grid)
    sl = (..., slice(border, -border or None), slice(border, -border or None))
    err = ((shifted[sl] - hr_t[sl]) ** 2).flatten(1).mean(dim=1)
    best = int(torch.argmin(err))
    best_sr = shifted[best].numpy()
    return (
        psnr(hr_t[sl].numpy(), best_sr[sl], i_max),
        ssim(hr_t[sl].numpy(), best_sr[sl], dynamic_range=i_max),
        tuple(grid[best].tolist()),
    )


# --- spectra and histograms ------------------------------------------------------


@dataclass(frozen=True)
class SpectrumCurve:
    radial_freq: np.ndarray
    power_db: np.ndarray


def _ring_index(N: int) -> np.ndarray:
    f = np.fft.fftfreq(N)
    r = np.hypot(f[:, None], f[None, :])
    return np.rint(r * N).astype(int)


def power_spectrum_2d(img: np.ndarray) -> np.ndarray:
    """|DFT|^2 / N^2 per band, so that its sum equals the sum of squared pixels."""
    img = np.asarray(img, dtype=np.float64)
    N = img.shape[-1] * img.shape[-2]
    return np.abs(np.fft.fft2(img)) ** 2 / N


def power_spectrum(images: Sequence[np.ndarray]) -> SpectrumCurve:
    """Radially averaged log power over ``N/2`` rings, averaged over bands/images."""
    images = list(images)
    if not images:
        raise ValueError("no images")
    N = images[0].shape[-1]
    for im in images:
        if im.shape[-1] != im.shape[-2]:
            raise ValueError(f"power spectrum needs square images, got {im.shape[-2:]}")
        if im.shape[-1] != N or N % 2:
            raise ValueError("all images must share one even size N")
    ring = _ring_index(N).ravel()
    nbins = N // 2
    keep = (ring >= 1) & (ring <= nbins)
    counts = np.bincount(ring[keep], minlength=nbins + 1)[1:]
    acc = np.zeros(nbins)
    n = 0
    for im in images:
        im = np.asarray(im, dtype=np.float64)
        if im.ndim == 2:
            im = im[None]
        for band in power_spectrum_2d(im):
            sums = np.bincount(ring[keep], weights=band.ravel()[keep], minlength=nbins + 1)[1:]
            mean_pow = sums / counts
            db = np.where(mean_pow > LOG_FLOOR, 10 * np.log10(np.maximum(mean_pow, LOG_FLOOR)), LOG_FLOOR_DB)
            acc += db
            n += 1
    return SpectrumCurve(np.arange(1, nbins + 1) / N, acc / n)


def high_frequency_power(images: Iterable[np.ndarray], cutoff: float = 0.25) -> float:
    """Mean (over images and bands) spectral energy above ``cutoff`` cycles/pixel."""
    total, n = 0.0, 0
    for im in images:
        im = np.asarray(im, dtype=np.float64)
        if im.ndim == 2:
            im = im[None]
        fy = np.fft.fftfreq(im.shape[-2])[:, None]
        fx = np.fft.fftfreq(im.shape[-1])[None, :]
        sel = np.hypot(fy, fx) > cutoff
        for band in power_spectrum_2d(im):
            total += band[sel].sum()
            n += 1
    return total / max(n, 1)


@dataclass(frozen=True)
class BandHistograms:
    hist: np.ndarray  # [C, bins], rows sum to 1
    edges: np.ndarray
    clipped: int


def band_histograms(images, bins: int = 256, value_range=(0.0, 1.0)) -> BandHistograms:
    """Normalized per-band histograms pooled over a list of [C, H, W] images.

    Values outside ``value_range`` are clipped into the edge bins and counted.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    images = [im[None] if im.ndim == 2 else im for im in images]
    C = images[0].shape[0]
    lo, hi = value_range
    counts = np.zeros((C, bins))
    clipped = 0
    edges = np.linspace(lo, hi, bins + 1)
    for im in images:
        if im.shape[0] != C:
            raise ValueError("band count differs between images")
        clipped += int(np.count_nonzero((im < lo) | (im > hi)))
        vals = np.clip(im, lo, hi)
        for c in range(C):
            counts[c] += np.histogram(vals[c], bins=edges)[0]
    return BandHistograms(counts / counts.sum(axis=1, keepdims=True), edges, clipped)


def histogram_l1(a: BandHistograms, b: BandHistograms) -> float:
    """Mean over bands of the L1 distance between normalized histograms."""
    return float(np.abs(a.hist - b.hist).sum(axis=1).mean())


# --- reports ------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    method: str
    split: str
    psnr_db: float
    ssim: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def summarize(method: str, split: str, psnrs, ssims) -> MetricReport:
    """Mean scores; exact reconstructions (infinite PSNR) are left out of the PSNR mean."""
    psnrs = np.asarray(list(psnrs), dtype=float)
    finite = psnrs[np.isfinite(psnrs)]
    value = math.inf if finite.size == 0 else float(finite.mean())
    return MetricReport(method, split, value, float(np.mean(list(ssims))), len(psnrs))


def format_table(reports: Sequence[MetricReport]) -> str:
    """Markdown table: one row per split, a PSNR/SSIM column pair per method."""
    methods = list(dict.fromkeys(r.method for r in reports))
    splits = list(dict.fromkeys(r.split for r in reports))
    by = {(r.split, r.method): r for r in reports}
    head = "| split | " + " | ".join(f"{m} PSNR | {m} SSIM" for m in methods) + " |"
    sep = "|---" * (1 + 2 * len(methods)) + "|"
    lines = [head, sep]
    for s in splits:
        cells = []
        for m in methods:
            r = by.get((s, m))
            cells += ["-", "-"] if r is None else [f"{r.psnr_db:.2f}", f"{r.ssim:.4f}"]
        lines.append(f"| {s} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
