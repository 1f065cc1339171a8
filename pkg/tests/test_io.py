import json
import struct

import numpy as np
import pytest
import torch
import torch.nn as nn

from misrsat.checkpoint import MAGIC, load_into, namespaces, read_checkpoint, save_checkpoint
from misrsat.data import DegradationSpec, generate_synthetic_scene
from misrsat.highresnet import HighResNet, HighResNetConfig
from misrsat.io import load_dataset, read_manifest, read_raster, read_raster_array, save_scene, write_manifest, write_raster
from misrsat.optim import PlateauScheduler


def test_raster_roundtrip(tmp_path):
    px = np.random.default_rng(0).random((3, 5, 7)).astype(np.float32)
    p = write_raster(tmp_path / "r", px, 10.0, (1, 10, 0, 2, 0, -10), band_names=["a", "b", "c"])
    raster, header = read_raster(p)
    np.testing.assert_array_equal(raster.pixels, px)
    assert header["band_names"] == ["a", "b", "c"]
    assert raster.geo_transform == (1, 10, 0, 2, 0, -10)


def test_raster_layout_is_little_endian_band_major(tmp_path):
    px = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    write_raster(tmp_path / "r", px, 1.0, (0, 1, 0, 0, 0, -1))
    raw = (tmp_path / "r.raw").read_bytes()
    assert struct.unpack("<12f", raw) == tuple(range(12))


def test_truncated_raster_rejected(tmp_path):
    write_raster(tmp_path / "r", np.zeros((1, 4, 4)), 1.0, (0, 1, 0, 0, 0, -1))
    (tmp_path / "r.raw").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        read_raster_array(tmp_path / "r.raw")


def test_no_temp_files_left(tmp_path):
    write_raster(tmp_path / "r", np.zeros((1, 2, 2)), 1.0, (0, 1, 0, 0, 0, -1))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["r.json", "r.raw"]


def test_dataset_roundtrip(tmp_path):
    deg = DegradationSpec(cloud_probability=0.7)
    scenes = [generate_synthetic_scene(i, 3, 2, (32, 32), 2, deg, scene_id=f"s{i}") for i in range(2)]
    entries = [save_scene(s, tmp_path, {"train": [[0, 0]]}) for s in scenes]
    write_manifest(tmp_path / "manifest.json", entries, seed=1)
    doc = read_manifest(tmp_path / "manifest.json")
    assert doc["format"] == "misrsat-manifest/1" and doc["seed"] == 1
    assert {"scene_id", "revisits", "hr_path", "splits"} <= set(doc["scenes"][0])
    loaded = load_dataset(tmp_path / "manifest.json")
    for a, b in zip(scenes, loaded):
        assert a.scene_id == b.scene_id
        np.testing.assert_array_equal(a.hr_reference.pixels, b.hr_reference.pixels)
        np.testing.assert_array_equal(a.building_mask, b.building_mask)
        assert b.truth == json.loads(json.dumps(a.truth))
        for ra, rb in zip(a.revisits, b.revisits):
            np.testing.assert_array_equal(ra.raster.pixels, rb.raster.pixels)
            np.testing.assert_array_equal(ra.cloud_mask, rb.cloud_mask)
            assert ra.acquired_at == rb.acquired_at


def test_manifest_requires_scenes(tmp_path):
    (tmp_path / "m.json").write_text("{}")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.json")


# --- checkpoints -------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = HighResNet(HighResNetConfig(in_bands=1, hidden=4))
    cm = nn.Conv2d(1, 2, 1)
    cfg = {"hidden": 4, "seed": 3}
    digest = save_checkpoint(tmp_path / "m.ckpt", {"misr": net, "color_match": cm}, cfg)
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == MAGIC
    header, arrays = read_checkpoint(tmp_path / "m.ckpt")
    assert header["config"] == cfg and header["config_hash"] == digest
    assert namespaces(arrays) == {"misr", "color_match"}
    fresh = HighResNet(HighResNetConfig(in_bands=1, hidden=4))
    load_into(fresh, arrays, "misr")
    for (k, a), (_, b) in zip(net.state_dict().items(), fresh.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_hash_tamper_detected(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"x": nn.Linear(2, 2)}, {"a": 1})
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    i = raw.index(b'"a": 1')
    raw[i + 5] = ord("2")
    (tmp_path / "m.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(ValueError):
        read_checkpoint(tmp_path / "x.ckpt")


def test_load_into_missing_namespace():
    with pytest.raises(KeyError):
        load_into(nn.Linear(1, 1), {"misr.w": np.zeros(1)}, "sisr")


# --- plateau scheduler -------------------------------------------------------------------------


def _opt(lr=1.0):
    return torch.optim.SGD([nn.Parameter(torch.zeros(1))], lr=lr)


def test_plateau_halves_after_two_stagnant_epochs():
    sched = PlateauScheduler(_opt(), patience=2, factor=0.5)
    assert not sched.step(1.0)
    assert not sched.step(1.0)
    assert sched.step(1.2)
    assert sched.lr == 0.5
    # counter resets after a reduction
    assert not sched.step(1.1)
    assert sched.step(1.1)
    assert sched.lr == 0.25


def test_plateau_improvement_resets_counter():
    sched = PlateauScheduler(_opt(), patience=2)
    for loss in (1.0, 1.0, 0.9, 0.95, 0.8, 0.85):
        assert not sched.step(loss)
    assert sched.lr == 1.0
