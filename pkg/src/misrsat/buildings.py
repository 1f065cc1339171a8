"""Building delineation as a downstream check of SR imagery.

Semantic IoU on masks, pixel-boundary vectorization of connected components,
and one-to-one instance matching at an IoU threshold.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .data import Scene, usable_revisits
from .ingest import rank_revisits
from .optim import PlateauScheduler, TrainingDiverged

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class InputKind(str, enum.Enum):
    BICUBIC_BEST1 = "bicubic_best1"
    SISR_BEST1 = "sisr_best1"
    CONCAT_BEST4_BICUBIC = "concat_best4_bicubic"
    MISR_ALL = "misr_all"
    HR_NATIVE = "hr_native"


@dataclass(frozen=True)
class InputConfiguration:
    kind: InputKind
    channels: int

    @classmethod
    def for_bands(cls, kind, bands: int) -> "InputConfiguration":
        kind = InputKind(kind)
        return cls(kind, 4 * bands if kind is InputKind.CONCAT_BEST4_BICUBIC else bands)


def bicubic_upsample(img: np.ndarray, s: int) -> np.ndarray:
    t = torch.from_numpy(np.array(img, dtype=np.float32))[None]
    return F.interpolate(t, scale_factor=s, mode="bicubic", align_corners=False)[0].numpy()


def best_revisit_indices(scene: Scene, k: int) -> list:
    """The ``k`` clearest usable revisits, padded with the clearest one."""
    order = rank_revisits(scene)
    usable = {id(r) for r in usable_revisits(scene)}
    picked = [i for i in order if id(scene.revisits[i]) in usable][:k]
    if not picked:
        picked = order[:1]
    return picked + [picked[0]] * (k - len(picked))


@torch.no_grad()
def build_input(scene: Scene, kind, sr_models: Optional[dict] = None, misr_revisits: str = "all") -> np.ndarray:
    """Model input on the HR grid for one of the five input configurations.

    ``sr_models`` maps ``"sisr"``/``"misr"`` to trained networks.
    """
    kind = InputKind(kind)
    s = scene.sr_factor
    sr_models = sr_models or {}
    if kind is InputKind.HR_NATIVE:
        return scene.hr_reference.pixels
    if kind is InputKind.BICUBIC_BEST1:
        return bicubic_upsample(scene.revisits[rank_revisits(scene)[0]].raster.pixels, s)
    if kind is InputKind.CONCAT_BEST4_BICUBIC:
        idx = best_revisit_indices(scene, 4)
        return np.concatenate([bicubic_upsample(scene.revisits[i].raster.pixels, s) for i in idx])
    if kind is InputKind.SISR_BEST1:
        if "sisr" not in sr_models:
            raise ValueError("sisr_best1 needs a trained SISR model")
        lr = torch.from_numpy(scene.revisits[rank_revisits(scene)[0]].raster.pixels.copy())
        return sr_models["sisr"].eval()(lr).numpy()
    if "misr" not in sr_models:
        raise ValueError("misr_all needs a trained MISR model")
    if misr_revisits == "best4":
        idx = best_revisit_indices(scene, 4)
    else:
        idx = list(range(len(scene.revisits)))
    lr = torch.from_numpy(scene.lr_stack()[idx].copy())
    masks = torch.from_numpy(scene.mask_stack()[idx].copy())
    return sr_models["misr"].eval()(lr, masks).numpy()


def semantic_iou(pred_mask, gt_mask) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


# --- vectorization ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Polygon:
    """Closed rings of (x, y) vertices in pixel-corner coordinates (y down).

    Interiors follow the even-odd rule over all rings, which also covers holes.
    """

    rings: tuple

    @property
    def area(self) -> float:
        total = 0.0
        for ring in self.rings:
            x, y = ring[:, 0], ring[:, 1]
            total += 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        return abs(total)

    @property
    def exterior(self) -> np.ndarray:
        return max(self.rings, key=lambda r: (np.ptp(r[:, 0]) * np.ptp(r[:, 1]), len(r)))

    def bounds(self) -> tuple:
        pts = np.concatenate(self.rings)
        return pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()

    def to_feature(self, fid) -> dict:
        return {"id": fid, "rings": [r.tolist() for r in self.rings]}

    @classmethod
    def from_feature(cls, feat: dict) -> "Polygon":
        return cls(tuple(np.asarray(r, dtype=float) for r in feat["rings"]))


def _boundary_edges(comp: np.ndarray) -> list:
    """Unit edges between component and background, oriented clockwise (y down)."""
    H, W = comp.shape
    p = np.pad(comp, 1)
    edges = []
    # horizontal edges at row boundary r (between pixel rows r-1 and r)
    top = p[1:, 1:-1] & ~p[:-1, 1:-1]  # pixel (r, c) inside, (r-1, c) outside
    bot = p[:-1, 1:-1] & ~p[1:, 1:-1]  # pixel (r-1, c) inside, (r, c) outside
    for r, c in zip(*np.nonzero(top)):
        edges.append(((c, r), (c + 1, r)))
    for r, c in zip(*np.nonzero(bot)):
        edges.append(((c + 1, r), (c, r)))
    left = p[1:-1, 1:] & ~p[1:-1, :-1]  # pixel (r, c) inside, (r, c-1) outside
    right = p[1:-1, :-1] & ~p[1:-1, 1:]  # pixel (r, c-1) inside, (r, c) outside
    for r, c in zip(*np.nonzero(left)):
        edges.append(((c, r + 1), (c, r)))
    for r, c in zip(*np.nonzero(right)):
        edges.append(((c, r), (c, r + 1)))
    return edges


def _link_rings(edges: list) -> list:
    outgoing: dict = {}
    for a, b in edges:
        outgoing.setdefault(a, []).append(b)
    for v in outgoing.values():
        v.sort()
    rings = []
    for start in sorted(outgoing):
        while outgoing[start]:
            ring = [start]
            cur = outgoing[start].pop(0)
            while cur != start:
                ring.append(cur)
                cur = outgoing[cur].pop(0)
            rings.append(_drop_collinear(np.asarray(ring, dtype=float)))
    return rings


def _drop_collinear(ring: np.ndarray) -> np.ndarray:
    prev = np.roll(ring, 1, axis=0)
    nxt = np.roll(ring, -1, axis=0)
    cross = (ring[:, 0] - prev[:, 0]) * (nxt[:, 1] - ring[:, 1]) - (ring[:, 1] - prev[:, 1]) * (nxt[:, 0] - ring[:, 0])
    return ring[cross != 0]


def polygonize(mask, min_area: int = 4) -> list:
    """Trace the 8-connected components of ``mask`` into pixel-boundary polygons.

    Components smaller than ``min_area`` pixels are dropped. Output order
    follows the component labels (raster scan order of first pixel).
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    polys = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sizes[k] < min_area:
            continue
        comp = labels[sl] == k
        r0, c0 = sl[0].start, sl[1].start
        rings = _link_rings(_boundary_edges(comp))
        polys.append(Polygon(tuple(ring + np.array([c0, r0], dtype=float) for ring in rings)))
    return polys


def rasterize(polygon: Polygon, shape, origin=(0.0, 0.0)) -> np.ndarray:
    """Even-odd fill evaluated at pixel centers of an ``shape`` grid at ``origin`` (x, y)."""
    H, W = shape
    ox, oy = origin
    toggles = np.zeros((H, W + 1), dtype=np.uint8)
    cy = oy + np.arange(H) + 0.5
    for ring in polygon.rings:
        a = ring
        b = np.roll(ring, -1, axis=0)
        for (x1, y1), (x2, y2) in zip(a, b):
            if y1 == y2:
                continue
            lo, hi = min(y1, y2), max(y1, y2)
            rows = np.nonzero((cy >= lo) & (cy < hi))[0]
            if rows.size == 0:
                continue
            x_int = x1 + (cy[rows] - y1) * (x2 - x1) / (y2 - y1)
            # pixel j is left of the crossing when its center ox + j + 0.5 < x_int
            k = np.clip(np.ceil(x_int - ox - 0.5).astype(int), 0, W)
            np.bitwise_xor.at(toggles, (rows, np.zeros_like(rows)), 1)
            np.bitwise_xor.at(toggles, (rows, k), 1)
    inside = np.bitwise_xor.accumulate(toggles, axis=1)[:, :W]
    return inside.astype(bool)


def polygon_iou_matrix(pred: Sequence[Polygon], gt: Sequence[Polygon]) -> np.ndarray:
    """Pairwise IoU, computed on a shared raster covering every polygon."""
    if not pred or not gt:
        return np.zeros((len(pred), len(gt)))
    b = np.array([p.bounds() for p in list(pred) + list(gt)])
    x0, y0 = np.floor(b[:, 0].min()), np.floor(b[:, 1].min())
    W = int(np.ceil(b[:, 2].max() - x0)) + 1
    H = int(np.ceil(b[:, 3].max() - y0)) + 1
    P = np.stack([rasterize(p, (H, W), (x0, y0)).ravel() for p in pred]).astype(np.float64)
    G = np.stack([rasterize(g, (H, W), (x0, y0)).ravel() for g in gt]).astype(np.float64)
    inter = P @ G.T
    union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass
class InstanceMatchResult:
    matches: list
    unmatched_pred: list
    unmatched_gt: list
    threshold: float
    n_pred: int = 0
    n_gt: int = 0

    @property
    def precision(self) -> float:
        if self.n_pred == 0:
            return 1.0 if self.n_gt == 0 else 0.0
        return len(self.matches) / self.n_pred

    @property
    def recall(self) -> float:
        if self.n_gt == 0:
            return 1.0 if self.n_pred == 0 else 0.0
        return len(self.matches) / self.n_gt

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def match_iou_matrix(iou: np.ndarray, threshold: float = 0.25, inclusive: bool = True) -> InstanceMatchResult:
    """Greedy one-to-one matching in descending IoU order (ties: lower indices first)."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    iou = np.asarray(iou, dtype=float)
    if iou.ndim != 2:
        raise ValueError("iou must be a [n_pred, n_gt] matrix")
    n_pred, n_gt = iou.shape
    ok = iou >= threshold if inclusive else iou > threshold
    cand = [(-iou[i, j], i, j) for i, j in zip(*np.nonzero(ok))]
    cand.sort()
    used_p, used_g, matches = set(), set(), []
    for neg, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((int(i), int(j), float(-neg)))
    return InstanceMatchResult(
        matches,
        [i for i in range(n_pred) if i not in used_p],
        [j for j in range(n_gt) if j not in used_g],
        threshold,
        n_pred,
        n_gt,
    )


def match_instances(pred: Sequence[Polygon], gt: Sequence[Polygon], threshold: float = 0.25, inclusive: bool = True) -> InstanceMatchResult:
    return match_iou_matrix(polygon_iou_matrix(pred, gt), threshold, inclusive)


def read_ground_truth(path) -> list:
    """Polygons from a JSON list of ``{"id", "rings"}`` features."""
    doc = json.loads(Path(path).read_text())
    feats = doc["features"] if isinstance(doc, dict) else doc
    return [Polygon.from_feature(f) for f in feats]


def ground_truth_features(polygons: Sequence[Polygon]) -> dict:
    return {"features": [p.to_feature(i) for i, p in enumerate(polygons)]}


# --- segmentation -------------------------------------------------------------------


class SegmentationBackbone(nn.Module):
    """Interface: [B, C_in, H, W] image -> [B, 1, H, W] building logits."""

    in_channels: int


class SimpleFCN(SegmentationBackbone):
    """Fully convolutional net without spatial pooling (dilated 3x3 stack)."""

    def __init__(self, in_channels: int, width: int = 32, dilations=(1, 1, 2, 4, 1)):
        super().__init__()
        self.in_channels = in_channels
        layers, c = [], in_channels
        for d in dilations:
            layers += [nn.Conv2d(c, width, 3, padding=d, dilation=d), nn.ReLU()]
            c = width
        layers.append(nn.Conv2d(c, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


@dataclass
class SegmentationResult:
    model: nn.Module
    mean: np.ndarray
    std: np.ndarray
    best_val_iou: float
    best_epoch: int
    log: list = field(default_factory=list)

    @torch.no_grad()
    def predict(self, image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        x = (np.asarray(image, np.float32) - self.mean[:, None, None]) / self.std[:, None, None]
        self.model.eval()
        logits = self.model(torch.from_numpy(x)[None])[0, 0]
        return (torch.sigmoid(logits) >= threshold).numpy()


def _batched_iou(model, x, y) -> float:
    with torch.no_grad():
        pred = model(x) >= 0
    tgt = y >= 0.5
    union = (pred | tgt).sum().item()
    return 1.0 if union == 0 else (pred & tgt).sum().item() / union


def train_segmentation(
    train: tuple,
    val: tuple,
    backbone: nn.Module,
    epochs: int = 50,
    lr: float = 7e-4,
    plateau_patience: int = 2,
    lr_factor: float = 0.5,
    batch_size: int = 8,
    seed: int = 0,
) -> SegmentationResult:
    """Train a building segmenter with BCE + Adam; keep the best-val-IoU weights.

    ``train``/``val`` are ``(images [N, C, H, W], masks [N, H, W])`` arrays.
    """
    x_tr, y_tr = train
    x_va, y_va = val
    if len(x_tr) == 0:
        raise ValueError("empty segmentation training set")
    mean = x_tr.mean(axis=(0, 2, 3)).astype(np.float32)
    std = (x_tr.std(axis=(0, 2, 3)) + 1e-6).astype(np.float32)
    norm = lambda a: torch.from_numpy(((a - mean[:, None, None]) / std[:, None, None]).astype(np.float32))
    xt, yt = norm(x_tr), torch.from_numpy(y_tr.astype(np.float32))[:, None]
    xv, yv = norm(x_va), torch.from_numpy(y_va.astype(np.float32))[:, None]

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    sched = PlateauScheduler(opt, patience=plateau_patience, factor=lr_factor)
    lines = [f"objective=binary_cross_entropy optimizer=Adam lr={lr} plateau_patience={plateau_patience} epochs={epochs}"]
    best = (-1.0, -1, None)
    for epoch in range(epochs):
        backbone.train()
        order = rng.permutation(len(xt))
        tot = 0.0
        for k in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[k : k + batch_size])
            loss = F.binary_cross_entropy_with_logits(backbone(xt[idx]), yt[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite BCE at epoch {epoch}, batch {k // batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
        backbone.eval()
        with torch.no_grad():
            val_loss = F.binary_cross_entropy_with_logits(backbone(xv), yv).item()
        val_iou = _batched_iou(backbone, xv, yv)
        sched.step(val_loss)
        lines.append(
            f"epoch={epoch + 1} train_bce={tot / len(xt):.6f} val_bce={val_loss:.6f} val_iou={val_iou:.6f} lr={sched.lr:.6g}"
        )
        if val_iou > best[0]:
            best = (val_iou, epoch + 1, {k: v.clone() for k, v in backbone.state_dict().items()})
    backbone.load_state_dict(best[2])
    for line in lines:
        log.debug(line)
    return SegmentationResult(backbone, mean, std, best[0], best[1], lines)
