"""Core dataset types, within-scene splitting and the synthetic scene generator."""

from __future__ import annotations

import datetime as dt
import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

IDENTITY_TRANSFORM = (0.0, 1.0, 0.0, 0.0, 0.0, -1.0)
TERRAIN_TAGS = frozenset({"desert", "agri", "urban", "veg", "bare"})

# nominal Sentinel-2 visible-band ground sampling distance
LR_RESOLUTION_M = 10.0
TRAIN_FRACTION = 0.8


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Raster:
    """Band-major reflectance array with its grid description.

    ``geo_transform`` follows the GDAL ordering
    ``(x0, pixel_width, row_rotation, y0, col_rotation, -pixel_height)``.
    ``scale`` is the divisor that was used to bring source values into [0, 1].
    """

    pixels: np.ndarray
    resolution_m: float
    geo_transform: tuple = IDENTITY_TRANSFORM
    scale: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or min(px.shape) < 1:
            raise ValueError(f"raster pixels must be [C, H, W], got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("raster contains non-finite values")
        if not self.resolution_m > 0:
            raise ValueError("resolution_m must be positive")
        gt = tuple(float(v) for v in self.geo_transform)
        if len(gt) != 6:
            raise ValueError("geo_transform needs 6 coefficients")
        object.__setattr__(self, "pixels", _frozen(px, np.float32))
        object.__setattr__(self, "geo_transform", gt)
        object.__setattr__(self, "resolution_m", float(self.resolution_m))

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    def bounds(self) -> tuple[float, float, float, float]:
        """(left, bottom, right, top) in world coordinates."""
        x0, pw, _, y0, _, ph = self.geo_transform
        h, w = self.shape
        x1, y1 = x0 + w * pw, y0 + h * ph
        return min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)


@dataclass(frozen=True, eq=False)
class Revisit:
    raster: Raster
    acquired_at: dt.date
    cloud_mask: np.ndarray
    cloud_fraction: float = float("nan")

    def __post_init__(self):
        mask = np.asarray(self.cloud_mask, dtype=bool)
        if mask.shape != self.raster.shape:
            raise ValueError(
                f"cloud mask shape {mask.shape} does not match raster {self.raster.shape}"
            )
        frac = float(mask.mean())
        if not np.isnan(self.cloud_fraction) and abs(self.cloud_fraction - frac) > 1e-9:
            raise ValueError("cloud_fraction disagrees with cloud_mask")
        object.__setattr__(self, "cloud_mask", _frozen(mask, bool))
        object.__setattr__(self, "cloud_fraction", frac)


@dataclass(frozen=True, eq=False)
class Scene:
    """A revisit time series over one area together with its high-res target.

    ``truth`` holds the degradation parameters of synthetic scenes and
    ``building_mask`` the footprint mask on the HR grid when available.
    """

    scene_id: str
    revisits: tuple
    hr_reference: Raster
    terrain_tags: frozenset = frozenset()
    truth: Optional[dict] = None
    building_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        revisits = tuple(self.revisits)
        if not revisits:
            raise ValueError("a scene needs at least one revisit")
        first = revisits[0].raster
        for r in revisits[1:]:
            if r.raster.shape != first.shape or r.raster.geo_transform != first.geo_transform:
                raise ValueError("all revisits must share one grid")
            if r.raster.bands != first.bands:
                raise ValueError("inconsistent band counts across revisits")
        unknown = set(self.terrain_tags) - TERRAIN_TAGS
        if unknown:
            raise ValueError(f"unknown terrain tags {sorted(unknown)}")
        lb, bb, rb, tb = first.bounds()
        hl, hb, hr_, ht = self.hr_reference.bounds()
        tol = 1e-6 * max(1.0, abs(rb - lb), abs(tb - bb))
        if hl > lb + tol or hb > bb + tol or hr_ < rb - tol or ht < tb - tol:
            raise ValueError("hr_reference does not cover the revisit extent")
        object.__setattr__(self, "revisits", revisits)
        object.__setattr__(self, "terrain_tags", frozenset(self.terrain_tags))
        if self.building_mask is not None:
            object.__setattr__(self, "building_mask", _frozen(self.building_mask, bool))

    @property
    def lr_shape(self) -> tuple[int, int]:
        return self.revisits[0].raster.shape

    @property
    def sr_factor(self) -> int:
        h, _ = self.lr_shape
        return self.hr_reference.shape[0] // h

    def lr_stack(self) -> np.ndarray:
        return np.stack([r.raster.pixels for r in self.revisits])

    def mask_stack(self) -> np.ndarray:
        return np.stack([r.cloud_mask for r in self.revisits])


@dataclass(frozen=True, eq=False)
class PatchSample:
    lr_stack: np.ndarray
    lr_masks: np.ndarray
    hr_target: np.ndarray
    split: Split
    scene_id: str
    origin: tuple

    def __post_init__(self):
        t, c, h, w = self.lr_stack.shape
        if self.lr_masks.shape != (t, h, w):
            raise ValueError("mask stack shape mismatch")
        hc, hh, hw = self.hr_target.shape
        if hc != c or hh % h or hw % w or hh // h != hw // w:
            raise ValueError("hr_target must be an integer multiple of the LR patch")


def assign_split(origin, scene_dims, patch) -> Optional[Split]:
    """Split label of a patch at ``origin``, or None when it straddles a boundary."""
    r, c = origin
    H, W = scene_dims
    h, w = patch
    if r < 0 or c < 0 or r + h > H or c + w > W:
        return None
    cut_row = TRAIN_FRACTION * H
    mid_col = 0.5 * W
    if r + h <= cut_row:
        return Split.TRAIN
    if r >= cut_row:
        if c + w <= mid_col:
            return Split.VAL
        if c >= mid_col:
            return Split.TEST
    return None


def split_scene(scene_dims, patch, stride=None) -> dict:
    """Map every patch origin on a regular grid to its split label.

    Patches that straddle the train/holdout row or the val/test midline are
    left out of the mapping.
    """
    H, W = scene_dims
    h, w = patch
    if h < 1 or w < 1 or h > H or w > W:
        raise ValueError(f"patch {patch} does not fit in scene {scene_dims}")
    sr, sc = stride if stride is not None else (h, w)
    rows = set(range(0, H - h + 1, sr))
    cols = set(range(0, W - w + 1, sc))
    # make sure the holdout band is sampled even when the grid skips it
    first_holdout = int(np.ceil(TRAIN_FRACTION * H))
    rows.update(range(first_holdout, H - h + 1, sr))
    cols.update(range(int(np.ceil(0.5 * W)), W - w + 1, sc))
    out = {}
    for r in sorted(rows):
        for c in sorted(cols):
            label = assign_split((r, c), scene_dims, patch)
            if label is not None:
                out[(r, c)] = label
    return out


def usable_revisits(scene: Scene, max_cloud: float = 0.5) -> list:
    return [r for r in scene.revisits if r.cloud_fraction < max_cloud]


def extract_patches(scene: Scene, patch=(64, 64), stride=None, splits=None) -> list:
    """Cut aligned (LR stack, HR target) samples out of a scene."""
    s = scene.sr_factor
    lr = scene.lr_stack()
    masks = scene.mask_stack()
    hr = scene.hr_reference.pixels
    h, w = patch
    samples = []
    for (r, c), label in split_scene(scene.lr_shape, patch, stride).items():
        if splits is not None and label not in splits:
            continue
        samples.append(
            PatchSample(
                lr_stack=lr[:, :, r : r + h, c : c + w],
                lr_masks=masks[:, r : r + h, c : c + w],
                hr_target=hr[:, s * r : s * (r + h), s * c : s * (c + w)],
                split=label,
                scene_id=scene.scene_id,
                origin=(r, c),
            )
        )
    return samples


# --- synthetic corpus -------------------------------------------------------


@dataclass(frozen=True)
class DegradationSpec:
    """Parameters of the HR -> LR revisit simulation.

    Shifts and blur are in HR pixels. ``color_gain``/``color_offset`` are
    per-band affine terms applied to every LR revisit; ``None`` disables them.
    ``shifts`` pins the per-revisit translations instead of drawing them.
    """

    shift_range: float = 2.0
    shifts: Optional[tuple] = None
    blur_sigma: float = 1.0
    noise_sigma: float = 0.01
    color_gain: Optional[tuple] = None
    color_offset: Optional[tuple] = None
    cloud_probability: float = 0.0
    cloud_max_fraction: float = 0.6

    @classmethod
    def identity(cls) -> "DegradationSpec":
        return cls(
            shift_range=0.0, shifts=None, blur_sigma=0.0, noise_sigma=0.0,
            cloud_probability=0.0,
        )


def area_downsample(img: np.ndarray, s: int) -> np.ndarray:
    """Average non-overlapping ``s x s`` blocks of a [C, H, W] array."""
    if s == 1:
        return img.copy()
    c, H, W = img.shape
    if H % s or W % s:
        raise ValueError(f"dims {H}x{W} not divisible by factor {s}")
    return img.reshape(c, H // s, s, W // s, s).mean(axis=(2, 4))


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    f -= f.min()
    peak = f.max()
    return f / peak if peak > 0 else f


def _draw_hr(rng, C, H, W):
    """Smooth background, flat fields and small bright/dark buildings."""
    base = rng.uniform(0.2, 0.35, size=C)
    img = np.empty((C, H, W))
    for b in range(C):
        img[b] = base[b] + 0.15 * _smooth_field(rng, (H, W), max(H, W) / 10)
    n_fields = rng.integers(2, 5)
    for _ in range(n_fields):
        fh, fw = rng.integers(H // 6, H // 2 + 1), rng.integers(W // 6, W // 2 + 1)
        r, c = rng.integers(0, H - fh + 1), rng.integers(0, W - fw + 1)
        color = rng.uniform(0.1, 0.45, size=C)
        img[:, r : r + fh, c : c + fw] = 0.5 * img[:, r : r + fh, c : c + fw] + 0.5 * color[:, None, None]
    buildings = np.zeros((H, W), bool)
    n_build = rng.integers(H * W // 400, H * W // 150 + 2)
    for _ in range(n_build):
        bh, bw = rng.integers(2, 7), rng.integers(2, 7)
        r, c = rng.integers(0, H - bh + 1), rng.integers(0, W - bw + 1)
        # keep a one-pixel street around every footprint
        if buildings[max(r - 1, 0) : r + bh + 1, max(c - 1, 0) : c + bw + 1].any():
            continue
        roof = rng.uniform(0.55, 0.7, size=C) if rng.random() < 0.75 else rng.uniform(0.02, 0.08, size=C)
        img[:, r : r + bh, c : c + bw] = roof[:, None, None]
        buildings[r : r + bh, c : c + bw] = True
    return np.clip(img, 0.0, 1.0), buildings


def _cloud_mask(rng, shape, fraction) -> np.ndarray:
    if fraction <= 0:
        return np.zeros(shape, bool)
    field_ = _smooth_field(rng, shape, max(shape) / 8)
    return field_ >= np.quantile(field_, 1.0 - fraction)


def degrade(hr: np.ndarray, s: int, shift, deg: DegradationSpec, rng, gain=None, offset=None):
    """HR [C,H,W] -> one LR observation: shift, blur, area downsample, noise, color."""
    dx, dy = shift
    x = hr.astype(np.float64)
    if dx or dy:
        x = ndimage.shift(x, (0.0, dy, dx), order=3, mode="nearest")
    if deg.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, (0.0, deg.blur_sigma, deg.blur_sigma), mode="nearest")
    x = area_downsample(x, s)
    if deg.noise_sigma > 0:
        x = x + rng.normal(0.0, deg.noise_sigma, size=x.shape)
    if gain is not None:
        x = gain[:, None, None] * x + offset[:, None, None]
    return x


def generate_synthetic_scene(
    seed: int,
    T: int,
    C: int,
    hr_dims: Sequence[int],
    s: int,
    degradation: DegradationSpec = DegradationSpec(),
    scene_id: Optional[str] = None,
) -> Scene:
    """Draw a random HR scene and ``T`` degraded LR revisits of it.

    The same ``seed`` always yields a bit-identical scene. Every drawn
    parameter (shifts, color terms, cloud cover) is recorded in ``Scene.truth``.
    """
    H, W = hr_dims
    if T < 1 or C < 1:
        raise ValueError("T and C must be >= 1")
    if s not in (1, 2, 3):
        raise ValueError(f"sr factor must be 1, 2 or 3, got {s}")
    if H < s or W < s or H % s or W % s:
        raise ValueError(f"hr dims {hr_dims} must be positive multiples of {s}")
    deg = degradation
    rng = np.random.default_rng(seed)
    hr, buildings = _draw_hr(rng, C, H, W)

    if deg.shifts is not None:
        if len(deg.shifts) != T:
            raise ValueError("need one explicit shift per revisit")
        shifts = [tuple(float(v) for v in sh) for sh in deg.shifts]
    else:
        shifts = [tuple(rng.uniform(-deg.shift_range, deg.shift_range, 2)) for _ in range(T)]
    gain = offset = None
    if deg.color_gain is not None or deg.color_offset is not None:
        gain = np.broadcast_to(np.asarray(deg.color_gain if deg.color_gain is not None else 1.0, float), (C,)).copy()
        offset = np.broadcast_to(np.asarray(deg.color_offset if deg.color_offset is not None else 0.0, float), (C,)).copy()

    lr_res = LR_RESOLUTION_M
    hr_res = lr_res / s
    x0 = float(rng.integers(0, 10_000)) * lr_res
    y0 = float(rng.integers(0, 10_000)) * lr_res
    lr_gt = (x0, lr_res, 0.0, y0, 0.0, -lr_res)
    hr_gt = (x0, hr_res, 0.0, y0, 0.0, -hr_res)

    day_offsets = np.sort(rng.choice(62, size=min(T, 62), replace=False))
    if T > 62:
        day_offsets = np.sort(rng.integers(0, 62, size=T))
    start = dt.date(2019, 12, 1)

    revisits = []
    cloud_targets = []
    for t in range(T):
        lr = degrade(hr, s, shifts[t], deg, rng, gain, offset)
        target = 0.0
        if deg.cloud_probability > 0 and rng.random() < deg.cloud_probability:
            target = float(rng.uniform(0.05, deg.cloud_max_fraction))
        mask = _cloud_mask(rng, lr.shape[1:], target)
        if mask.any():
            haze = 0.8 + 0.15 * _smooth_field(rng, lr.shape[1:], 2.0)
            lr = np.where(mask[None], haze[None], lr)
        cloud_targets.append(target)
        revisits.append(
            Revisit(
                raster=Raster(np.clip(lr, 0.0, 1.0), lr_res, lr_gt),
                acquired_at=start + dt.timedelta(days=int(day_offsets[t])),
                cloud_mask=mask,
            )
        )

    truth = {
        "seed": int(seed),
        "sr_factor": int(s),
        "shifts": [list(sh) for sh in shifts],
        "blur_sigma": deg.blur_sigma,
        "noise_sigma": deg.noise_sigma,
        "color_gain": None if gain is None else gain.tolist(),
        "color_offset": None if offset is None else offset.tolist(),
        "cloud_fractions": [r.cloud_fraction for r in revisits],
    }
    tags = frozenset(rng.choice(sorted(TERRAIN_TAGS), size=2, replace=False).tolist()) | {"urban"}
    return Scene(
        scene_id=scene_id or f"synth-{seed:06d}",
        revisits=tuple(revisits),
        hr_reference=Raster(hr, hr_res, hr_gt),
        terrain_tags=tags,
        truth=truth,
        building_mask=buildings,
    )


def synthetic_corpus(n_scenes: int, seed: int = 0, **kwargs) -> list:
    """``n_scenes`` independent synthetic scenes with consecutive seeds."""
    return [generate_synthetic_scene(seed + i, **kwargs) for i in range(n_scenes)]
