import datetime as dt
import json

import numpy as np
import pytest

from misrsat.cli import main
from misrsat.checkpoint import read_checkpoint
from misrsat.io import dataset_hash, write_raster

TINY_SYNTH = ["--scenes", "3", "--hr-size", "120", "--revisits", "4", "--seed", "5"]
TINY_TRAIN = {"patch": 12, "hidden": 4, "sisr_blocks": 1, "epochs": 2, "shiftnet_width": 4, "shiftnet_pretrain_steps": 20, "seed": 3}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _listing(root):
    return sorted((str(p.relative_to(root)), p.stat().st_size) for p in root.rglob("*"))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), *TINY_SYNTH]) == 0
    manifest = root / "data" / "manifest.json"
    ckpts = {}
    for model in ("misr", "sisr", "misr_consistency"):
        cfg = root / f"{model}.json"
        cfg.write_text(json.dumps({**TINY_TRAIN, "model": model, "dataset": str(manifest), "output_dir": str(root / model)}))
        assert main(["train", "--config", str(cfg)]) == 0
        ckpts[model] = root / model / "checkpoint.ckpt"
    return root, manifest, ckpts


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--out", tmp_path / name, *TINY_SYNTH)[0] == 0
    assert dataset_hash(tmp_path / "a" / "manifest.json") == dataset_hash(tmp_path / "b" / "manifest.json")
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert doc["seed"] == 5 and doc["generator"]["revisits"] == 4


def test_output_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MISRSAT_OUTPUT_ROOT", str(tmp_path))
    code, out, _ = run(capsys, "synth", "--out", "rel", "--scenes", "1", "--hr-size", "40", "--revisits", "2")
    assert code == 0
    assert (tmp_path / "rel" / "manifest.json").exists()
    assert json.loads(out.splitlines()[-1])["status"] == "ok"


def test_missing_dataset_gives_error_record(tmp_path, capsys):
    code, _, err = run(capsys, "split", "--dataset", tmp_path / "nope.json", "--out", tmp_path)
    assert code != 0
    rec = json.loads(err.strip().splitlines()[-1])
    assert rec["status"] == "error" and rec["command"] == "split" and rec["error"] == "FileNotFoundError"


def test_bad_arguments_give_error_record(capsys):
    code, _, err = run(capsys, "evaluate", "--dataset", "x.json", "--split", "holdout")
    assert code == 2
    assert json.loads(err.strip())["error"] == "UsageError"


def test_unknown_config_key_rejected(tmp_path, capsys, workspace):
    _, manifest, _ = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": str(manifest), "learning_rate": 1.0}))
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 2 and "learning_rate" in err


def test_split_counts(tmp_path, capsys, workspace):
    _, manifest, _ = workspace
    assert run(capsys, "split", "--dataset", manifest, "--patch", 12, "--out", tmp_path)[0] == 0
    doc = json.loads((tmp_path / "splits.json").read_text())
    # 60x60 LR scenes, 12x12 patches: the column grid {0, 12, 24, 36, 48} gains {30, 42}
    # from the test half, giving 4 x 7 train, 2 val and 4 test origins per scene
    assert doc["counts"] == {"train": 84, "val": 6, "test": 12}
    assert doc["provenance"]["dataset_hash"] == dataset_hash(manifest)


def test_train_artifacts_and_determinism(tmp_path, capsys, workspace):
    root, manifest, ckpts = workspace
    header, arrays = read_checkpoint(ckpts["misr"])
    cfg = header["config"]
    assert cfg["seed"] == 3 and cfg["dataset_hash"] == dataset_hash(manifest)
    assert {k.split(".")[0] for k in arrays} == {"misr", "shiftnet"}
    log = [json.loads(line) for line in (root / "misr" / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2]
    assert {"train_loss", "val_loss", "val_psnr", "val_ssim", "lr"} <= set(log[0])
    # same config, fresh output directory
    again = tmp_path / "again.json"
    again.write_text(json.dumps({**TINY_TRAIN, "model": "misr", "dataset": str(manifest), "output_dir": str(tmp_path / "r")}))
    assert run(capsys, "train", "--config", again)[0] == 0
    a = json.loads((root / "misr" / "train_summary.json").read_text())
    b = json.loads((tmp_path / "r" / "train_summary.json").read_text())
    assert abs(a["best_val_loss"] - b["best_val_loss"]) <= 1e-6
    for ra, rb in zip(a["history"], b["history"]):
        for k in ra:
            assert abs(ra[k] - rb[k]) <= 1e-6


def test_evaluate_report(tmp_path, capsys, workspace):
    _, manifest, ckpts = workspace
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ckpts["misr_consistency"], "--checkpoint", ckpts["sisr"], "--dataset", manifest, "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    methods = [r["method"] for r in doc["reports"]]
    assert methods == ["bicubic", "sisr", "misr", "misr_cm"]
    assert all(r["split"] == "test" for r in doc["reports"])
    assert doc["provenance"]["dataset_hash"] == dataset_hash(manifest)
    assert "| test |" in (tmp_path / "report.md").read_text()
    spec = json.loads((tmp_path / "spectrum.json").read_text())
    assert set(spec["power_db"]) == {"hr", *methods}
    hist = json.loads((tmp_path / "histograms.json").read_text())
    assert {"to_lr", "to_hr"} <= set(hist["l1"]["misr_cm"])


def test_evaluate_is_deterministic(tmp_path, capsys, workspace):
    _, manifest, ckpts = workspace
    for name in ("a", "b"):
        assert run(capsys, "evaluate", "--checkpoint", ckpts["misr"], "--dataset", manifest, "--split", "val", "--out", tmp_path / name)[0] == 0
    for f in ("report.json", "spectrum.json", "histograms.json"):
        a = json.loads((tmp_path / "a" / f).read_text())
        b = json.loads((tmp_path / "b" / f).read_text())
        a["provenance"].pop("config")
        b["provenance"].pop("config")
        assert a == b


def test_spectrum_and_hist_commands(tmp_path, capsys, workspace):
    _, manifest, ckpts = workspace
    assert run(capsys, "spectrum", "--checkpoint", ckpts["misr"], "--dataset", manifest, "--out", tmp_path)[0] == 0
    assert run(capsys, "hist", "--checkpoint", ckpts["misr"], "--dataset", manifest, "--bins", 32, "--out", tmp_path)[0] == 0
    hist = json.loads((tmp_path / "histograms.json").read_text())
    assert len(hist["edges"]) == 33
    for rows in hist["histograms"].values():
        np.testing.assert_allclose(np.sum(rows, axis=1), 1.0)


def test_downstream_report(tmp_path, capsys, workspace):
    _, manifest, ckpts = workspace
    argv = ["downstream", "--checkpoint", ckpts["misr"], "--checkpoint", ckpts["sisr"], "--dataset", manifest, "--epochs", 2, "--width", 4, "--patch", 12]
    assert run(capsys, *argv, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *argv, "--out", tmp_path / "b")[0] == 0
    md = (tmp_path / "a" / "downstream.md").read_text()
    assert "instance matching threshold: 0.25" in md
    a = json.loads((tmp_path / "a" / "downstream.json").read_text())
    b = json.loads((tmp_path / "b" / "downstream.json").read_text())
    assert set(a["rows"]) == {"bicubic_best1", "sisr_best1", "concat_best4_bicubic", "misr_all", "hr_native"}
    assert a["rows"] == b["rows"]
    for row in a["rows"].values():
        f1 = [row["instance"][k]["f1"] for k in ("0.1", "0.25", "0.5")]
        assert f1[0] >= f1[1] >= f1[2]


def test_plots_write_sidecars(tmp_path, capsys, workspace):
    root, manifest, ckpts = workspace
    assert run(capsys, "evaluate", "--checkpoint", ckpts["misr"], "--dataset", manifest, "--out", tmp_path)[0] == 0
    assert run(capsys, "plots", "--run", tmp_path)[0] == 0
    for name in ("spectrum", "histograms"):
        assert (tmp_path / f"{name}.png").stat().st_size > 0
        assert (tmp_path / f"{name}_plot.json").exists()
    assert run(capsys, "plots", "--run", root / "misr", "--out", tmp_path / "p")[0] == 0
    assert (tmp_path / "p" / "loss.png").exists()


def test_commands_do_not_touch_dataset(workspace, tmp_path, capsys):
    root, manifest, ckpts = workspace
    before = _listing(manifest.parent)
    run(capsys, "split", "--dataset", manifest, "--out", tmp_path)
    run(capsys, "hist", "--checkpoint", ckpts["sisr"], "--dataset", manifest, "--out", tmp_path)
    assert _listing(manifest.parent) == before


def test_ingest_command(tmp_path, capsys):
    hr = np.random.default_rng(0).random((3, 20, 20)).astype(np.float32)
    write_raster(tmp_path / "hr", hr, 5.0, (0.0, 5.0, 0, 200.0, 0, -5.0))
    prods = []
    for k in range(2):
        px = np.concatenate([np.random.default_rng(k).random((3, 10, 10)), np.zeros((1, 10, 10))]).astype(np.float32)
        date = dt.date(2020, 1, 1 + k).isoformat()
        p = write_raster(tmp_path / f"p{k}", px, 10.0, (0.0, 10.0, 0, 200.0, 0, -10.0), band_names=["B0", "B1", "B2", "SCL"], acquired_at=date)
        prods.append(str(p))
    jobs = tmp_path / "jobs.json"
    jobs.write_text(json.dumps([{"hr": str(tmp_path / "hr.raw"), "products": prods, "start": "2020-01-01", "end": "2020-01-31", "scene_id": "aoi"}]))
    code, out, _ = run(capsys, "ingest", "--manifest", jobs, "--target-res", 10, "--sr-factor", 2, "--out", tmp_path / "ds")
    assert code == 0
    doc = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert doc["scenes"][0]["scene_id"] == "aoi" and len(doc["scenes"][0]["revisits"]) == 2
