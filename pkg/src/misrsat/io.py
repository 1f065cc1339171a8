"""On-disk formats: raster container, dataset manifest and atomic writes.

Raster container: ``<name>.raw`` holds little-endian float32 values in
band-major order; ``<name>.json`` is the sidecar header with ``dims``,
``bands``, ``resolution_m``, ``geo_transform`` and ``scale`` plus free-form
extras (band names, acquisition date).
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .data import Raster, Revisit, Scene

RAW_DTYPE = np.dtype("<f4")


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".raw", ".json") else p


def write_raster(path, pixels, resolution_m, geo_transform, scale=1.0, **extra) -> Path:
    """Write a [C, H, W] array; returns the path of the ``.raw`` file."""
    stem = _stem(path)
    px = np.asarray(pixels)
    if px.ndim == 2:
        px = px[None]
    header = {
        "dims": [int(px.shape[1]), int(px.shape[2])],
        "bands": int(px.shape[0]),
        "resolution_m": float(resolution_m),
        "geo_transform": [float(v) for v in geo_transform],
        "scale": float(scale),
        "dtype": "float32-le",
        "layout": "band-major",
    }
    header.update(extra)
    atomic_write_bytes(stem.with_suffix(".raw"), px.astype(RAW_DTYPE).tobytes(order="C"))
    write_json(stem.with_suffix(".json"), header)
    return stem.with_suffix(".raw")


def read_raster_array(path):
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    h, w = header["dims"]
    c = header["bands"]
    data = np.fromfile(stem.with_suffix(".raw"), dtype=RAW_DTYPE)
    if data.size != c * h * w:
        raise ValueError(f"{stem}: expected {c * h * w} values, found {data.size}")
    return data.reshape(c, h, w).astype(np.float32), header


def read_raster(path) -> tuple[Raster, dict]:
    px, header = read_raster_array(path)
    return Raster(px, header["resolution_m"], tuple(header["geo_transform"]), header.get("scale", 1.0)), header


def save_raster(path, raster: Raster, **extra) -> Path:
    return write_raster(path, raster.pixels, raster.resolution_m, raster.geo_transform, raster.scale, **extra)


# --- manifest -----------------------------------------------------------------


def save_scene(scene: Scene, root, split_info=None) -> dict:
    """Write one scene's rasters below ``root`` and return its manifest entry."""
    root = Path(root)
    sdir = root / scene.scene_id
    hr_path = save_raster(sdir / "hr", scene.hr_reference)
    revisits = []
    for i, r in enumerate(scene.revisits):
        p = save_raster(sdir / f"lr_{i:02d}", r.raster, acquired_at=r.acquired_at.isoformat())
        m = write_raster(sdir / f"mask_{i:02d}", r.cloud_mask.astype(np.float32), r.raster.resolution_m, r.raster.geo_transform)
        revisits.append(
            {
                "path": str(p.relative_to(root)),
                "mask_path": str(m.relative_to(root)),
                "acquired_at": r.acquired_at.isoformat(),
                "cloud_fraction": r.cloud_fraction,
            }
        )
    entry = {
        "scene_id": scene.scene_id,
        "hr_path": str(hr_path.relative_to(root)),
        "revisits": revisits,
        "terrain_tags": sorted(scene.terrain_tags),
        "splits": split_info or {},
    }
    if scene.building_mask is not None:
        b = write_raster(sdir / "buildings", scene.building_mask.astype(np.float32), scene.hr_reference.resolution_m, scene.hr_reference.geo_transform)
        entry["buildings_path"] = str(b.relative_to(root))
    if scene.truth is not None:
        entry["degradation"] = scene.truth
    return entry


def load_scene(entry: dict, root) -> Scene:
    root = Path(root)
    hr, _ = read_raster(root / entry["hr_path"])
    revisits = []
    for r in entry["revisits"]:
        raster, _ = read_raster(root / r["path"])
        mask, _ = read_raster_array(root / r["mask_path"])
        revisits.append(Revisit(raster, dt.date.fromisoformat(r["acquired_at"]), mask[0] > 0.5))
    buildings = None
    if "buildings_path" in entry:
        buildings = read_raster_array(root / entry["buildings_path"])[0][0] > 0.5
    return Scene(
        scene_id=entry["scene_id"],
        revisits=tuple(revisits),
        hr_reference=hr,
        terrain_tags=frozenset(entry.get("terrain_tags", ())),
        truth=entry.get("degradation"),
        building_mask=buildings,
    )


def write_manifest(path, entries: list, **meta) -> None:
    doc = {"format": "misrsat-manifest/1", **meta, "scenes": entries}
    write_json(path, doc)


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if "scenes" not in doc:
        raise ValueError(f"{path}: not a dataset manifest (no 'scenes' key)")
    return doc


def load_dataset(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    return [load_scene(e, manifest_path.parent) for e in doc["scenes"]]


def dataset_hash(manifest_path) -> str:
    """sha256 over the manifest and every file it references, in manifest order."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    doc = read_manifest(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    for e in doc["scenes"]:
        rels = [e["hr_path"]] + [p for r in e["revisits"] for p in (r["path"], r["mask_path"])]
        if "buildings_path" in e:
            rels.append(e["buildings_path"])
        for rel in rels:
            stem = _stem(root / rel)
            for suffix in (".json", ".raw"):
                h.update(stem.with_suffix(suffix).read_bytes())
    return h.hexdigest()
