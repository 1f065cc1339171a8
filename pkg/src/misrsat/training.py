"""Training loops and evaluation for the SR networks."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .buildings import bicubic_upsample
from .consistency import ColorMatch, ConsistencyConfig, combined_loss
from .data import Scene, Split, extract_patches
from .highresnet import HighResNet, HighResNetConfig
from .ingest import rank_revisits
from .metrics import LOSSES, aligned_scores, summarize
from .registration import ShiftNet, registered_loss, train_shiftnet
from .optim import PlateauScheduler, TrainingDiverged
from .srresnet import SRResNet, SRResNetConfig

log = logging.getLogger(__name__)

MODELS = ("misr", "sisr", "misr_consistency")


@dataclass
class PatchSet:
    lr: torch.Tensor  # [N, T, C, h, w]
    masks: torch.Tensor  # [N, T, h, w]
    hr: torch.Tensor  # [N, C, H, W]
    best: torch.Tensor  # [N] clearest revisit of the source scene
    scene_ids: list
    origins: list

    def __len__(self):
        return len(self.lr)

    def subset(self, idx) -> "PatchSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        il = idx.tolist()
        return PatchSet(self.lr[idx], self.masks[idx], self.hr[idx], self.best[idx], [self.scene_ids[i] for i in il], [self.origins[i] for i in il])

    def single_input(self) -> torch.Tensor:
        return self.lr[torch.arange(len(self)), self.best]


def patch_set(scenes: Sequence[Scene], patch=(16, 16), stride=None, split: Split = Split.TRAIN) -> PatchSet:
    lr, masks, hr, best, ids, origins = [], [], [], [], [], []
    for scene in scenes:
        b = rank_revisits(scene)[0]
        for p in extract_patches(scene, patch, stride, splits={split}):
            lr.append(p.lr_stack)
            masks.append(p.lr_masks)
            hr.append(p.hr_target)
            best.append(b)
            ids.append(p.scene_id)
            origins.append(p.origin)
    if not lr:
        raise ValueError(f"no {split.value} patches of size {patch} in the given scenes")
    return PatchSet(
        torch.from_numpy(np.stack(lr)),
        torch.from_numpy(np.stack(masks)),
        torch.from_numpy(np.stack(hr)),
        torch.tensor(best, dtype=torch.long),
        ids,
        origins,
    )


@dataclass
class TrainConfig:
    model: str = "misr"
    bands: int = 3
    sr_factor: int = 2
    hidden: int = 64
    enc_residual_blocks: int = 2
    sisr_blocks: int = 16
    loss: str = "ssim"
    lr: float = 7e-4
    plateau_patience: int = 2
    lr_factor: float = 0.5
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    shiftnet_width: int = 16
    shiftnet_pretrain_steps: int = 800
    joint_shiftnet: bool = True
    w_consistency: float = 0.9
    w_sr: float = 0.1
    cm_hidden: int = 64

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def misr_config(self) -> HighResNetConfig:
        return HighResNetConfig(self.bands, self.hidden, self.enc_residual_blocks, self.sr_factor)

    def sisr_config(self) -> SRResNetConfig:
        return SRResNetConfig(self.bands, self.hidden, self.sisr_blocks, self.sr_factor)

    def consistency_config(self) -> ConsistencyConfig:
        return ConsistencyConfig(self.w_consistency, self.w_sr, self.cm_hidden)


def build_models(cfg: TrainConfig) -> dict:
    """Fresh networks for ``cfg.model``, keyed by checkpoint namespace."""
    torch.manual_seed(cfg.seed)
    models = {"shiftnet": ShiftNet(cfg.bands, width=cfg.shiftnet_width, fc_width=4 * cfg.shiftnet_width)}
    if cfg.model == "sisr":
        models["sisr"] = SRResNet(cfg.sisr_config())
    else:
        models["misr"] = HighResNet(cfg.misr_config())
    if cfg.model == "misr_consistency":
        models["color_match"] = ColorMatch(cfg.bands, cfg.cm_hidden)
    return models


def batch_loss(cfg: TrainConfig, models: dict, lr, masks, hr, best) -> torch.Tensor:
    base = LOSSES[cfg.loss]
    if cfg.model == "sisr":
        sr = models["sisr"](lr[torch.arange(len(lr)), best])
        return registered_loss(sr, hr, base, models["shiftnet"])
    if cfg.model == "misr":
        return registered_loss(models["misr"](lr, masks), hr, base, models["shiftnet"])
    return combined_loss(lr, masks, hr, models["misr"], models["color_match"], models["shiftnet"], cfg.consistency_config(), base)


@torch.no_grad()
def dataset_loss(cfg, models, data: PatchSet, batch: int = 32) -> float:
    for m in models.values():
        m.eval()
    tot = 0.0
    for k in range(0, len(data), batch):
        sl = slice(k, k + batch)
        n = len(data.lr[sl])
        tot += batch_loss(cfg, models, data.lr[sl], data.masks[sl], data.hr[sl], data.best[sl]).item() * n
    return tot / len(data)


@dataclass
class TrainResult:
    models: dict
    history: list
    best_epoch: int
    best_val_loss: float
    shiftnet_history: list = field(default_factory=list)


def train_sr(
    cfg: TrainConfig,
    train: PatchSet,
    val: PatchSet,
    models: Optional[dict] = None,
    on_epoch: Optional[Callable] = None,
    val_metrics: bool = True,
) -> TrainResult:
    """Adam + plateau halving; restores the weights of the best validation epoch.

    ``on_epoch(epoch_record, models, improved)`` is called after every epoch
    (used by the CLI to persist checkpoints).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    models = models or build_models(cfg)
    sn_hist = []
    if cfg.shiftnet_pretrain_steps > 0:
        sn_hist = train_shiftnet(models["shiftnet"], steps=cfg.shiftnet_pretrain_steps, seed=cfg.seed, size=min(32, train.hr.shape[-1]), log_every=0)
    params = [p for ns, m in models.items() if ns != "shiftnet" or cfg.joint_shiftnet for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = PlateauScheduler(opt, cfg.plateau_patience, cfg.lr_factor)
    best_loss, best_epoch, best_state = math.inf, -1, None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        for m in models.values():
            m.train()
        if not cfg.joint_shiftnet:
            models["shiftnet"].eval()
        order = rng.permutation(len(train))
        tot = 0.0
        for k in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[k : k + cfg.batch_size])
            loss = batch_loss(cfg, models, train.lr[idx], train.masks[idx], train.hr[idx], train.best[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
        val_loss = dataset_loss(cfg, models, val)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        record = {"epoch": epoch, "train_loss": tot / len(train), "val_loss": val_loss, "lr": sched.lr}
        if val_metrics:
            method = "sisr" if cfg.model == "sisr" else "misr"
            sr = predict(method, models, val)
            scores = [aligned_scores(h, s, step=0.5) for h, s in zip(val.hr.numpy(), sr)]
            record["val_psnr"] = float(np.mean([p for p, _, _ in scores]))
            record["val_ssim"] = float(np.mean([s for _, s, _ in scores]))
        improved = val_loss < best_loss
        if improved:
            best_loss, best_epoch = val_loss, epoch
            best_state = {ns: {k: v.clone() for k, v in m.state_dict().items()} for ns, m in models.items()}
        sched.step(val_loss)
        record["lr_next"] = sched.lr
        history.append(record)
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.6g}" for k, v in record.items() if k != "epoch"))
        if on_epoch is not None:
            on_epoch(record, models, improved)
    for ns, m in models.items():
        m.load_state_dict(best_state[ns])
        m.eval()
    return TrainResult(models, history, best_epoch, best_loss, sn_hist)


# --- inference and scoring ----------------------------------------------------------------

METHODS = ("bicubic", "sisr", "misr", "misr_cm")


@torch.no_grad()
def predict(method: str, models: dict, data: PatchSet, batch: int = 32) -> np.ndarray:
    """SR images [N, C, H, W] for every patch of ``data``."""
    s = data.hr.shape[-1] // data.lr.shape[-1]
    single = data.single_input()
    if method == "bicubic":
        return np.stack([bicubic_upsample(x, s) for x in single.numpy()])
    outs = []
    for k in range(0, len(data), batch):
        sl = slice(k, k + batch)
        if method == "sisr":
            y = models["sisr"].eval()(single[sl])
        elif method in ("misr", "misr_cm"):
            y = models["misr"].eval()(data.lr[sl], data.masks[sl])
            if method == "misr_cm":
                y = models["color_match"].eval()(y)
        else:
            raise ValueError(f"unknown method {method!r}")
        outs.append(y.numpy())
    return np.concatenate(outs)


def evaluate(models: dict, data: PatchSet, methods: Sequence[str], split: str = "test", step: float = 0.25):
    """Shift-tolerant PSNR/SSIM per method; returns (reports, per-patch scores)."""
    reports, per_patch = [], {}
    hr = data.hr.numpy()
    for method in methods:
        sr = predict(method, models, data)
        scores = [aligned_scores(h, s, step=step) for h, s in zip(hr, sr)]
        per_patch[method] = scores
        reports.append(summarize(method, split, [p for p, _, _ in scores], [q for _, q, _ in scores]))
    return reports, per_patch
