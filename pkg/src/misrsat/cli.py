"""Batch command-line front end.

    misrsat synth | ingest | split | train | evaluate | spectrum | hist | downstream | plots

Relative output paths are resolved under ``$MISRSAT_OUTPUT_ROOT`` when it is
set. Every JSON artifact carries a ``provenance`` block with the command
config, the seed and the sha256 of the input dataset. Failures exit nonzero
and print a one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .buildings import InputConfiguration, InputKind, SimpleFCN, build_input, match_instances, polygonize, semantic_iou, train_segmentation
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .data import TRAIN_FRACTION, DegradationSpec, Split, split_scene, synthetic_corpus
from .ingest import IngestJob, coregister
from .io import atomic_write_text, dataset_hash, load_dataset, save_scene, write_json, write_manifest
from .metrics import band_histograms, format_table, high_frequency_power, histogram_l1, power_spectrum
from .training import TrainConfig, build_models, evaluate, patch_set, predict, train_sr

log = logging.getLogger("misrsat")

OUTPUT_ROOT_ENV = "MISRSAT_OUTPUT_ROOT"
DEFAULT_THRESHOLDS = (0.1, 0.25, 0.5)
MATCH_THRESHOLD = 0.25


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _provenance(args, config: dict, seed, ds_hash) -> dict:
    return {"command": args.command, "version": __version__, "config": _jsonable(config), "seed": seed, "dataset_hash": ds_hash}


def _args_config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")}


# --- dataset commands -----------------------------------------------------------------


def cmd_synth(args) -> dict:
    deg = DegradationSpec(
        shift_range=args.shift_range,
        blur_sigma=args.blur,
        noise_sigma=args.noise,
        color_gain=_floats(args.color_gain) if args.color_gain else None,
        color_offset=_floats(args.color_offset) if args.color_offset else None,
        cloud_probability=args.cloud_probability,
        cloud_max_fraction=args.cloud_max_fraction,
    )
    out = output_path(args.out)
    scenes = synthetic_corpus(args.scenes, seed=args.seed, T=args.revisits, C=args.bands, hr_dims=(args.hr_size, args.hr_size), s=args.sr_factor, degradation=deg)
    entries = [save_scene(s, out) for s in scenes]
    generator = {k: v for k, v in _args_config(args).items() if k != "out"}
    write_manifest(out / "manifest.json", entries, seed=args.seed, generator=generator)
    digest = dataset_hash(out / "manifest.json")
    log.info("wrote %d scenes to %s (dataset %s)", len(scenes), out, digest[:12])
    return {"manifest": str(out / "manifest.json"), "dataset_hash": digest, "scenes": len(scenes)}


def cmd_ingest(args) -> dict:
    """Co-register every job of a JSON job list into a dataset manifest."""
    jobs = json.loads(Path(args.manifest).read_text())
    if isinstance(jobs, dict):
        jobs = jobs["jobs"]
    out = output_path(args.out)
    entries = []
    for k, job in enumerate(jobs):
        scene = coregister(
            IngestJob(
                hr_scene_path=job["hr"],
                lr_product_paths=job["products"],
                date_window=(dt.date.fromisoformat(job["start"]), dt.date.fromisoformat(job["end"])),
                target_resolution_m=args.target_res,
                sr_factor=args.sr_factor,
                scene_id=job.get("scene_id", f"scene_{k:03d}"),
            )
        )
        entries.append(save_scene(scene, out))
        log.info("%s: %d revisits", scene.scene_id, len(scene.revisits))
    write_manifest(out / "manifest.json", entries, source=str(args.manifest), target_resolution_m=args.target_res, sr_factor=args.sr_factor)
    return {"manifest": str(out / "manifest.json"), "dataset_hash": dataset_hash(out / "manifest.json"), "scenes": len(entries)}


def cmd_split(args) -> dict:
    """Write the within-scene patch split next to (not into) the dataset."""
    scenes = load_dataset(args.dataset)
    patch = (args.patch, args.patch)
    stride = (args.stride, args.stride) if args.stride else None
    per_scene, counts = {}, {s.value: 0 for s in Split}
    for scene in scenes:
        mapping = split_scene(scene.lr_shape, patch, stride)
        by = {s.value: [] for s in Split}
        for origin, label in mapping.items():
            by[label.value].append(list(origin))
            counts[label.value] += 1
        per_scene[scene.scene_id] = by
    doc = {
        "provenance": _provenance(args, _args_config(args), None, dataset_hash(args.dataset)),
        "patch": args.patch,
        "counts": counts,
        "scenes": per_scene,
    }
    out = output_path(args.out)
    write_json(out / "splits.json", doc)
    return {"splits": str(out / "splits.json"), "counts": counts}


# --- training ----------------------------------------------------------------------------

TRAIN_KEYS = {"dataset", "output_dir", "patch"}


def load_experiment_config(path, overrides: dict) -> tuple[dict, TrainConfig]:
    """Flat JSON config: ``dataset``, ``output_dir``, ``patch`` plus TrainConfig keys."""
    raw = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(raw, dict):
        raise ValueError("config must be a flat JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    for k, v in raw.items():
        if isinstance(v, (dict, list)):
            raise ValueError(f"config key {k!r} must be a scalar")
    run = {k: raw.pop(k) for k in list(raw) if k in TRAIN_KEYS}
    if "dataset" not in run:
        raise ValueError("config needs a 'dataset' manifest path")
    if not Path(run["dataset"]).exists():
        raise FileNotFoundError(run["dataset"])
    run.setdefault("output_dir", "runs/train")
    run.setdefault("patch", 16)
    return run, TrainConfig.from_dict(raw)


def cmd_train(args) -> dict:
    run, cfg = load_experiment_config(args.config, {"dataset": args.dataset, "output_dir": args.out, "seed": args.seed, "epochs": args.epochs})
    scenes = load_dataset(run["dataset"])
    digest = dataset_hash(run["dataset"])
    patch = (run["patch"], run["patch"])
    train, val = patch_set(scenes, patch, None, Split.TRAIN), patch_set(scenes, patch, None, Split.VAL)
    out = output_path(run["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt_config = {"train": cfg.to_dict(), "patch": run["patch"], "seed": cfg.seed, "dataset_hash": digest}
    ckpt = out / "checkpoint.ckpt"
    lines = []

    def on_epoch(record, models, improved):
        lines.append(json.dumps(record, sort_keys=True))
        atomic_write_text(out / "train_log.jsonl", "\n".join(lines) + "\n")
        if improved:
            save_checkpoint(ckpt, models, ckpt_config)

    log.info("training %s on %d train / %d val patches", cfg.model, len(train), len(val))
    # on TrainingDiverged the error propagates; checkpoint.ckpt keeps the last good epoch
    result = train_sr(cfg, train, val, on_epoch=on_epoch)
    save_checkpoint(ckpt, result.models, ckpt_config)
    summary = {
        "provenance": _provenance(args, {**run, **cfg.to_dict()}, cfg.seed, digest),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs_run": len(result.history),
        "history": result.history,
        "checkpoint": str(ckpt),
    }
    write_json(out / "train_summary.json", summary)
    return {"checkpoint": str(ckpt), "best_val_loss": result.best_val_loss, "best_epoch": result.best_epoch}


def load_models(paths) -> tuple[dict, list]:
    """Merge the networks of several checkpoints; returns (models, headers)."""
    models, headers = {}, []
    for p in paths:
        header, arrays = read_checkpoint(p)
        cfg = TrainConfig.from_dict(header["config"]["train"])
        fresh = build_models(cfg)
        for ns, m in fresh.items():
            if ns in models:
                continue
            load_into(m, arrays, ns)
            models[ns] = m.eval()
        headers.append(header)
    return models, headers


def _methods(models: dict) -> list:
    methods = ["bicubic"]
    if "sisr" in models:
        methods.append("sisr")
    if "misr" in models:
        methods.append("misr")
    if "color_match" in models:
        methods.append("misr_cm")
    return methods


def _eval_data(args, headers):
    patch = args.patch or (headers[0]["config"]["patch"] if headers else 16)
    scenes = load_dataset(args.dataset)
    return patch_set(scenes, (patch, patch), None, Split(args.split)), patch


def _eval_provenance(args, headers, digest):
    cfg = {**_args_config(args), "checkpoints": [{"path": str(p), "config_hash": h["config_hash"]} for p, h in zip(args.checkpoint, headers)]}
    seeds = [h["config"].get("seed") for h in headers]
    return _provenance(args, cfg, seeds, digest)


def spectrum_doc(models, data) -> dict:
    hr = data.hr.numpy()
    curves = {"hr": power_spectrum(list(hr))}
    hf = {"hr": high_frequency_power(hr)}
    for m in _methods(models):
        sr = predict(m, models, data)
        curves[m] = power_spectrum(list(sr))
        hf[m] = high_frequency_power(sr)
    return {
        "radial_freq": next(iter(curves.values())).radial_freq.tolist(),
        "power_db": {k: v.power_db.tolist() for k, v in curves.items()},
        "high_frequency_cutoff": 0.25,
        "high_frequency_power": hf,
    }


def histogram_doc(models, data, bins: int = 128) -> dict:
    s = data.hr.shape[-1] // data.lr.shape[-1]
    lr = data.single_input().numpy()
    hists = {"lr": band_histograms(list(lr), bins), "hr": band_histograms(list(data.hr.numpy()), bins)}
    for m in _methods(models):
        if m != "bicubic" or s == 1:
            hists[m] = band_histograms(list(predict(m, models, data)), bins)
    dist = {}
    for m in hists:
        if m not in ("lr", "hr"):
            dist[m] = {"to_lr": histogram_l1(hists[m], hists["lr"]), "to_hr": histogram_l1(hists[m], hists["hr"])}
    return {
        "edges": hists["hr"].edges.tolist(),
        "histograms": {k: h.hist.tolist() for k, h in hists.items()},
        "clipped": {k: h.clipped for k, h in hists.items()},
        "l1": dist,
    }


def cmd_evaluate(args) -> dict:
    models, headers = load_models(args.checkpoint)
    data, patch = _eval_data(args, headers)
    digest = dataset_hash(args.dataset)
    reports, per_patch = evaluate(models, data, _methods(models), split=args.split)
    out = output_path(args.out)
    prov = _eval_provenance(args, headers, digest)
    table = format_table(reports)
    write_json(
        out / "report.json",
        {
            "provenance": prov,
            "patch": patch,
            "reports": [r.__dict__ for r in reports],
            "per_patch": {m: [{"psnr": p, "ssim": q, "shift": list(d)} for p, q, d in v] for m, v in per_patch.items()},
        },
    )
    atomic_write_text(out / "report.md", f"<!-- dataset {digest} -->\n{table}\n")
    write_json(out / "spectrum.json", {"provenance": prov, **spectrum_doc(models, data)})
    write_json(out / "histograms.json", {"provenance": prov, **histogram_doc(models, data)})
    print(table)
    return {"report": str(out / "report.json"), "psnr": {r.method: r.psnr_db for r in reports}, "ssim": {r.method: r.ssim for r in reports}}


def cmd_spectrum(args) -> dict:
    models, headers = load_models(args.checkpoint)
    data, _ = _eval_data(args, headers)
    doc = spectrum_doc(models, data)
    out = output_path(args.out)
    write_json(out / "spectrum.json", {"provenance": _eval_provenance(args, headers, dataset_hash(args.dataset)), **doc})
    return {"spectrum": str(out / "spectrum.json"), "high_frequency_power": doc["high_frequency_power"]}


def cmd_hist(args) -> dict:
    models, headers = load_models(args.checkpoint)
    data, _ = _eval_data(args, headers)
    doc = histogram_doc(models, data, args.bins)
    out = output_path(args.out)
    write_json(out / "histograms.json", {"provenance": _eval_provenance(args, headers, dataset_hash(args.dataset)), **doc})
    return {"histograms": str(out / "histograms.json"), "l1": doc["l1"]}


# --- downstream building segmentation ----------------------------------------------------


def _regions(scene, patch_lr: int):
    """HR-grid slices: train patches, val rectangle, test rectangle."""
    s = scene.sr_factor
    h, w = scene.lr_shape
    row0 = math.ceil(TRAIN_FRACTION * h) * s
    train = []
    for (r, c), label in split_scene((h, w), (patch_lr, patch_lr)).items():
        if label is Split.TRAIN:
            train.append((slice(s * r, s * (r + patch_lr)), slice(s * c, s * (c + patch_lr))))
    val = (slice(row0, h * s), slice(0, (w // 2) * s))
    test = (slice(row0, h * s), slice(math.ceil(w / 2) * s, w * s))
    return train, val, test


def instance_scores(pred_masks, gt_masks, thresholds) -> dict:
    """Pooled instance precision/recall/F1 per IoU threshold."""
    pairs = [(polygonize(p), polygonize(g)) for p, g in zip(pred_masks, gt_masks)]
    out = {}
    for t in thresholds:
        tp = n_pred = n_gt = 0
        for pred, gt in pairs:
            res = match_instances(pred, gt, t)
            tp += len(res.matches)
            n_pred += res.n_pred
            n_gt += res.n_gt
        p = tp / n_pred if n_pred else float(n_gt == 0)
        r = tp / n_gt if n_gt else float(n_pred == 0)
        out[f"{t:g}"] = {"precision": p, "recall": r, "f1": 0.0 if p + r == 0 else 2 * p * r / (p + r), "tp": tp, "n_pred": n_pred, "n_gt": n_gt}
    return out


def run_downstream(scenes, models: dict, kinds, epochs: int, seed: int, width: int = 16, patch_lr: int = 16, thresholds=DEFAULT_THRESHOLDS) -> dict:
    scenes = [s for s in scenes if s.building_mask is not None]
    if not scenes:
        raise ValueError("downstream evaluation needs scenes with building masks")
    rows = {}
    for kind in kinds:
        kind = InputKind(kind)
        xs_tr, ys_tr, xs_va, ys_va, xs_te, ys_te = [], [], [], [], [], []
        for scene in scenes:
            img = build_input(scene, kind, models)
            gt = scene.building_mask
            train, val, test = _regions(scene, patch_lr)
            for sl in train:
                xs_tr.append(img[(slice(None),) + sl])
                ys_tr.append(gt[sl])
            xs_va.append(img[(slice(None),) + val])
            ys_va.append(gt[val])
            xs_te.append(img[(slice(None),) + test])
            ys_te.append(gt[test])
        cfg = InputConfiguration.for_bands(kind, scenes[0].hr_reference.bands)
        torch.manual_seed(seed)
        res = train_segmentation(
            (np.stack(xs_tr).astype(np.float32), np.stack(ys_tr)),
            (np.stack(xs_va).astype(np.float32), np.stack(ys_va)),
            SimpleFCN(cfg.channels, width),
            epochs=epochs,
            seed=seed,
        )
        preds = [res.predict(x) for x in xs_te]
        inter = sum(int((p & g).sum()) for p, g in zip(preds, ys_te))
        union = sum(int((p | g).sum()) for p, g in zip(preds, ys_te))
        rows[kind.value] = {
            "iou": 1.0 if union == 0 else inter / union,
            "mean_scene_iou": float(np.mean([semantic_iou(p, g) for p, g in zip(preds, ys_te)])),
            "instance": instance_scores(preds, ys_te, thresholds),
            "best_val_iou": res.best_val_iou,
            "best_epoch": res.best_epoch,
        }
        log.info("%s: test IoU %.4f", kind.value, rows[kind.value]["iou"])
    return rows


def format_downstream(rows: dict, threshold: float = MATCH_THRESHOLD) -> str:
    key = f"{threshold:g}"
    lines = [
        f"instance matching threshold: {threshold:g}",
        "",
        "| input | IoU | precision | recall | F1 |",
        "|---|---|---|---|---|",
    ]
    for kind, row in rows.items():
        inst = row["instance"][key]
        lines.append(f"| {kind} | {row['iou']:.4f} | {inst['precision']:.4f} | {inst['recall']:.4f} | {inst['f1']:.4f} |")
    return "\n".join(lines)


def cmd_downstream(args) -> dict:
    models, headers = load_models(args.checkpoint) if args.checkpoint else ({}, [])
    kinds = [k.value for k in InputKind]
    if "sisr" not in models:
        kinds.remove(InputKind.SISR_BEST1.value)
    if "misr" not in models:
        kinds.remove(InputKind.MISR_ALL.value)
    thresholds = sorted(set(_floats(args.thresholds)) | {MATCH_THRESHOLD})
    scenes = load_dataset(args.dataset)
    digest = dataset_hash(args.dataset)
    rows = run_downstream(scenes, models, kinds, args.epochs, args.seed, args.width, args.patch, thresholds)
    out = output_path(args.out)
    prov = _eval_provenance(args, headers, digest)
    prov["seed"] = args.seed
    write_json(out / "downstream.json", {"provenance": prov, "match_threshold": MATCH_THRESHOLD, "thresholds": thresholds, "rows": rows})
    table = format_downstream(rows)
    atomic_write_text(out / "downstream.md", f"<!-- dataset {digest} seed {args.seed} -->\n{table}\n")
    print(table)
    return {"downstream": str(out / "downstream.json"), "iou": {k: v["iou"] for k, v in rows.items()}}


# --- plots -------------------------------------------------------------------------------


def cmd_plots(args) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = Path(args.run)
    out = output_path(args.out) if args.out else src
    written = []

    def save(fig, name, data):
        out.mkdir(parents=True, exist_ok=True)
        fig.savefig(out / f"{name}.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        write_json(out / f"{name}_plot.json", data)
        written.append(str(out / f"{name}.png"))

    if (src / "spectrum.json").exists():
        doc = json.loads((src / "spectrum.json").read_text())
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, curve in doc["power_db"].items():
            ax.plot(doc["radial_freq"], curve, label=name)
        ax.set_xlabel("spatial frequency (cycles/pixel)")
        ax.set_ylabel("power (dB)")
        ax.legend()
        save(fig, "spectrum", {"radial_freq": doc["radial_freq"], "power_db": doc["power_db"]})
    if (src / "histograms.json").exists():
        doc = json.loads((src / "histograms.json").read_text())
        edges = np.asarray(doc["edges"])
        centers = 0.5 * (edges[1:] + edges[:-1])
        n_bands = len(next(iter(doc["histograms"].values())))
        fig, axes = plt.subplots(1, n_bands, figsize=(4 * n_bands, 3), squeeze=False)
        for b, ax in enumerate(axes[0]):
            for name, h in doc["histograms"].items():
                ax.plot(centers, h[b], label=name)
            ax.set_title(f"band {b}")
        axes[0][0].legend()
        save(fig, "histograms", {"bin_centers": centers.tolist(), "histograms": doc["histograms"]})
    if (src / "train_log.jsonl").exists():
        recs = [json.loads(line) for line in (src / "train_log.jsonl").read_text().splitlines() if line]
        ep = [r["epoch"] for r in recs]
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(ep, [r["train_loss"] for r in recs], label="train")
        ax.plot(ep, [r["val_loss"] for r in recs], label="val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        save(fig, "loss", {"epoch": ep, "train_loss": [r["train_loss"] for r in recs], "val_loss": [r["val_loss"] for r in recs]})
    if not written:
        raise FileNotFoundError(f"{src}: no spectrum.json, histograms.json or train_log.jsonl")
    return {"plots": written}


# --- entry point ---------------------------------------------------------------------------


def _eval_args(p, out_default):
    p.add_argument("--checkpoint", action="append", default=[], help="repeatable")
    p.add_argument("--dataset", required=True, help="dataset manifest.json")
    p.add_argument("--split", default="test", choices=[s.value for s in Split])
    p.add_argument("--patch", type=int, default=None, help="LR patch size (default: from checkpoint)")
    p.add_argument("--out", default=out_default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="misrsat", description="Multi-image super-resolution of satellite revisits.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--revisits", type=int, default=8)
    p.add_argument("--bands", type=int, default=3)
    p.add_argument("--hr-size", type=int, default=160)
    p.add_argument("--sr-factor", type=int, default=2)
    p.add_argument("--shift-range", type=float, default=2.0)
    p.add_argument("--blur", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--color-gain", default="1.15,1.05,0.9")
    p.add_argument("--color-offset", default="0.03,0.0,-0.02")
    p.add_argument("--cloud-probability", type=float, default=0.4)
    p.add_argument("--cloud-max-fraction", type=float, default=0.6)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="co-register LR products to HR scenes")
    p.add_argument("--manifest", required=True, help="JSON list of {hr, products, start, end, scene_id}")
    p.add_argument("--target-res", type=float, default=10.0)
    p.add_argument("--sr-factor", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="write the within-scene patch split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train an SR model from a JSON config")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report plus spectrum and histograms")
    _eval_args(p, "runs/eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("spectrum", help="radially averaged power spectra")
    _eval_args(p, "runs/spectrum")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("hist", help="per-band value histograms")
    _eval_args(p, "runs/hist")
    p.add_argument("--bins", type=int, default=128)
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("downstream", help="building segmentation on each input configuration")
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--thresholds", default="0.1,0.25,0.5")
    p.add_argument("--out", default="runs/downstream")
    p.set_defaults(func=cmd_downstream)

    p = sub.add_parser("plots", help="render PNG plots with numeric sidecars")
    p.add_argument("--run", required=True, help="directory holding command artifacts")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plots)
    return parser


def _error_record(command, exc) -> str:
    return json.dumps({"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)})


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
    except UsageError as exc:
        print(_error_record(command, exc), file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(_error_record(command, exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        print(_error_record(command, exc), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": command, **_jsonable(result)}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
