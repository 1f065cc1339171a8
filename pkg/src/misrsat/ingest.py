"""Co-registration of LR products onto a common grid, plus revisit ranking.

Inputs are raster containers (see :mod:`misrsat.io`) that already share one
world frame; only axis-aligned affine transforms are supported.
"""

from __future__ import annotations

import datetime as dt
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import Raster, Revisit, Scene
from .io import read_raster, read_raster_array

log = logging.getLogger(__name__)

SCL_CLOUD_HIGH = 9
SCL_BAND = "SCL"


class EmptyOverlapError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Axis-aligned pixel grid: top-left corner, pixel size and shape."""

    x0: float
    y0: float
    res: float
    height: int
    width: int

    @property
    def transform(self) -> tuple:
        return (self.x0, self.res, 0.0, self.y0, 0.0, -self.res)

    @classmethod
    def from_transform(cls, gt, shape) -> "Grid":
        x0, pw, rx, y0, ry, ph = gt
        if rx or ry:
            raise SchemaError("rotated geo transforms are not supported")
        if abs(abs(ph) - pw) > 1e-9 * pw or ph > 0:
            raise SchemaError("expected square, north-up pixels")
        return cls(x0, y0, pw, shape[0], shape[1])


@dataclass(frozen=True)
class IngestJob:
    hr_scene_path: str
    lr_product_paths: Sequence[str]
    date_window: tuple
    target_resolution_m: float = 10.0
    sr_factor: int = 2
    scene_id: str = "scene"

    def __post_init__(self):
        start, end = self.date_window
        if start > end:
            raise ValueError("date_window start is after its end")


# --- resampling -----------------------------------------------------------------


def _source_coords(dst_x0, dst_res, n_dst, src_x0, src_res, sign=1.0):
    """Fractional source pixel index of each destination pixel center."""
    centers = dst_x0 + sign * (np.arange(n_dst) + 0.5) * dst_res
    return (centers - src_x0) / (sign * src_res) - 0.5


def bilinear_weights(coords: np.ndarray, n_src: int) -> np.ndarray:
    """Interpolation matrix [n_dst, n_src]; out-of-range coords replicate edges."""
    u = np.clip(coords, 0.0, n_src - 1)
    lo = np.floor(u).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = u - lo
    W = np.zeros((len(coords), n_src))
    rows = np.arange(len(coords))
    np.add.at(W, (rows, lo), 1.0 - frac)
    np.add.at(W, (rows, hi), frac)
    return W


def nearest_weights(coords: np.ndarray, n_src: int) -> np.ndarray:
    idx = np.clip(np.floor(coords + 0.5).astype(int), 0, n_src - 1)
    W = np.zeros((len(coords), n_src))
    W[np.arange(len(coords)), idx] = 1.0
    return W


def area_weights(dst_x0, dst_res, n_dst, src_x0, src_res, n_src, sign=1.0) -> np.ndarray:
    """Overlap-fraction matrix for area-average resampling along one axis."""
    edges = dst_x0 + sign * np.arange(n_dst + 1) * dst_res
    a = (edges[:-1] - src_x0) / (sign * src_res)
    b = (edges[1:] - src_x0) / (sign * src_res)
    k = np.arange(n_src)
    overlap = np.clip(np.minimum(b[:, None], k[None, :] + 1) - np.maximum(a[:, None], k[None, :]), 0.0, None)
    tot = overlap.sum(axis=1, keepdims=True)
    return np.divide(overlap, tot, out=np.zeros_like(overlap), where=tot > 0)


def _axis_coverage(coords, n_src):
    return (coords >= -0.5) & (coords <= n_src - 0.5)


def resample(pixels: np.ndarray, src: Grid, dst: Grid, kernel: str = "bilinear"):
    """Resample [C, H, W] from ``src`` to ``dst``.

    Returns ``(values, covered)`` where ``covered`` flags destination pixels
    whose centers fall inside the source footprint.
    """
    cy = _source_coords(dst.y0, dst.res, dst.height, src.y0, src.res, sign=-1.0)
    cx = _source_coords(dst.x0, dst.res, dst.width, src.x0, src.res)
    if kernel == "bilinear":
        Wy, Wx = bilinear_weights(cy, src.height), bilinear_weights(cx, src.width)
    elif kernel == "nearest":
        Wy, Wx = nearest_weights(cy, src.height), nearest_weights(cx, src.width)
    elif kernel == "area":
        Wy = area_weights(dst.y0, dst.res, dst.height, src.y0, src.res, src.height, sign=-1.0)
        Wx = area_weights(dst.x0, dst.res, dst.width, src.x0, src.res, src.width)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    out = np.einsum("ij,cjk,lk->cil", Wy, pixels.astype(np.float64), Wx)
    covered = _axis_coverage(cy, src.height)[:, None] & _axis_coverage(cx, src.width)[None, :]
    return out, covered


def _overlaps(a: Grid, b: Grid) -> bool:
    ax1, ay1 = a.x0 + a.width * a.res, a.y0 - a.height * a.res
    bx1, by1 = b.x0 + b.width * b.res, b.y0 - b.height * b.res
    return a.x0 < bx1 and b.x0 < ax1 and ay1 < b.y0 and by1 < a.y0


# --- products -------------------------------------------------------------------


@dataclass
class _Product:
    path: Path
    grid: Grid
    bands: np.ndarray
    scl: np.ndarray
    acquired_at: dt.date


def _load_product(path) -> _Product:
    px, header = read_raster_array(path)
    names = header.get("band_names") or [f"B{i}" for i in range(px.shape[0])]
    if SCL_BAND not in names:
        raise SchemaError(f"{path}: product has no {SCL_BAND} band")
    if "acquired_at" not in header:
        raise SchemaError(f"{path}: missing acquired_at")
    k = names.index(SCL_BAND)
    bands = np.delete(px, k, axis=0)
    return _Product(
        Path(path),
        Grid.from_transform(header["geo_transform"], px.shape[1:]),
        bands,
        px[k],
        dt.date.fromisoformat(header["acquired_at"]),
    )


def mosaic(layers: list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Merge same-date layers of ``(values, scl, covered)``.

    Precedence per pixel: a cloud-free covered pixel beats a cloudy one; among
    equals the later layer wins. Returns values, SCL and a per-pixel source
    index (-1 where nothing covers the pixel).
    """
    C, H, W = layers[0][0].shape
    values = np.zeros((C, H, W))
    scl = np.full((H, W), SCL_CLOUD_HIGH, dtype=float)
    source = np.full((H, W), -1, dtype=int)
    rank = np.full((H, W), -1, dtype=int)
    for i, (v, s, cov) in enumerate(layers):
        clear = cov & (s != SCL_CLOUD_HIGH)
        r = np.where(clear, 1, np.where(cov, 0, -1))
        take = (r >= rank) & cov
        values[:, take] = v[:, take]
        scl[take] = s[take]
        source[take] = i
        rank = np.where(take, r, rank)
    return values, scl, source


def coregister(job: IngestJob) -> Scene:
    """Build a Scene: crop and resample LR products to the HR footprint,
    mosaic same-date products, flag SCL==9 clouds and bring the HR raster onto
    the exact ``sr_factor`` multiple of the LR grid."""
    hr_raster, _ = read_raster(job.hr_scene_path)
    hr_grid = Grid.from_transform(hr_raster.geo_transform, hr_raster.shape)
    res = float(job.target_resolution_m)
    lr_grid = Grid(
        hr_grid.x0,
        hr_grid.y0,
        res,
        max(1, int(round(hr_grid.height * hr_grid.res / res))),
        max(1, int(round(hr_grid.width * hr_grid.res / res))),
    )
    start, end = job.date_window
    products = [_load_product(p) for p in job.lr_product_paths]
    products = [p for p in products if start <= p.acquired_at <= end]
    n_bands = {p.bands.shape[0] for p in products}
    if len(n_bands) > 1:
        raise SchemaError(f"inconsistent band counts across products: {sorted(n_bands)}")
    products = [p for p in products if _overlaps(p.grid, lr_grid)]
    if not products:
        raise EmptyOverlapError("no LR product overlaps the HR scene bounds")

    by_date: dict = {}
    for p in products:
        by_date.setdefault(p.acquired_at, []).append(p)
    revisits = []
    for date in sorted(by_date):
        layers = []
        for p in by_date[date]:
            v, cov = resample(p.bands, p.grid, lr_grid, "bilinear")
            s, _ = resample(p.scl[None], p.grid, lr_grid, "nearest")
            layers.append((v, s[0], cov))
        values, scl, source = mosaic(layers)
        if len(layers) > 1:
            log.info("%s: mosaicked %d products", date, len(layers))
        cloud = (scl == SCL_CLOUD_HIGH) | (source < 0)
        revisits.append(Revisit(Raster(values, res, lr_grid.transform), date, cloud))

    s = int(job.sr_factor)
    target_hr = Grid(lr_grid.x0, lr_grid.y0, res / s, lr_grid.height * s, lr_grid.width * s)
    hr_px, _ = resample(hr_raster.pixels, hr_grid, target_hr, "area")
    hr = Raster(hr_px, target_hr.res, target_hr.transform, hr_raster.scale)
    return Scene(job.scene_id, tuple(revisits), hr)


def rank_revisits(scene: Scene) -> list:
    """Revisit indices, clearest first; ties go to the earlier acquisition."""
    revs = scene.revisits
    return sorted(range(len(revs)), key=lambda i: (revs[i].cloud_fraction, revs[i].acquired_at, i))


# --- archive access ---------------------------------------------------------------


class FetchClient(Protocol):
    def list_products(self, scene_id: str, date_window: tuple) -> list: ...

    def fetch(self, product: str, dest) -> Path: ...


@dataclass
class LocalDirectoryClient:
    """Serves products from ``root/<scene_id>/*.raw``; no network access."""

    root: Path

    def list_products(self, scene_id: str, date_window: tuple) -> list:
        start, end = date_window
        out = []
        for raw in sorted(Path(self.root, scene_id).glob("*.raw")):
            _, header = read_raster_array(raw)
            if "acquired_at" in header and start <= dt.date.fromisoformat(header["acquired_at"]) <= end:
                out.append(str(raw))
        return out

    def fetch(self, product: str, dest) -> Path:
        src = Path(product)
        dest = Path(dest)
        dest.mkdir(parents=True, exist_ok=True)
        for suffix in (".raw", ".json"):
            shutil.copy2(src.with_suffix(suffix), dest / src.with_suffix(suffix).name)
        return dest / src.name
