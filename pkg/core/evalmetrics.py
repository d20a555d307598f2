"""Confusion-matrix metrics (F1, IoU, mean accuracy), seed aggregation and the
reconstruction sweep over target masking ratios."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from core.errors import GeometryError, NoMaskedPatchesWarning
from core.logs import get_logger
from core.patchseq import TARGET, plan_mask
from core.tensorstore import IGNORE, DomainDatasetDescriptor, write_tensor

logger = get_logger(__name__)


def confusion(pred_classes, truth, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred_classes)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise GeometryError(f"prediction {pred.shape} and truth {truth.shape} differ")
    keep = truth != IGNORE
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes or p.min() < 0):
        raise GeometryError(f"class ids must be < {num_classes}")
    return np.bincount(t * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _tp_fp_fn(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    return tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class_f1(cm) -> np.ndarray:
    tp, fp, fn = _tp_fp_fn(cm)
    return _ratio(2 * tp, 2 * tp + fp + fn)


def per_class_iou(cm) -> np.ndarray:
    tp, fp, fn = _tp_fp_fn(cm)
    return _ratio(tp, tp + fp + fn)


def miou(cm) -> float:
    return float(per_class_iou(cm).mean())


def mean_accuracy(cm) -> float:
    tp, _, fn = _tp_fp_fn(cm)
    gt = tp + fn
    if not (gt > 0).any():
        return 0.0
    return float((tp[gt > 0] / gt[gt > 0]).mean())


@dataclass
class MetricsReport:
    per_class_f1: list[float]
    ma: float
    miou: float
    mf1: float
    ma_std: float = 0.0
    miou_std: float = 0.0
    mf1_std: float = 0.0
    seeds: list[int] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm, seed: int | None = None) -> "MetricsReport":
        f1 = per_class_f1(cm)
        return cls(
            per_class_f1=[float(v) for v in f1],
            ma=mean_accuracy(cm),
            miou=miou(cm),
            mf1=float(f1.mean()),
            seeds=[] if seed is None else [seed],
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**data)


def aggregate_seeds(reports: list[MetricsReport]) -> MetricsReport:
    """Arithmetic mean and population std of MA/mIoU/mF1; per-class F1 averaged."""
    if not reports:
        raise ValueError("aggregate_seeds needs at least one report")
    n_classes = {len(r.per_class_f1) for r in reports}
    if len(n_classes) != 1:
        raise ValueError(f"inconsistent class sets across seeds: {sorted(n_classes)}")
    f1 = np.array([r.per_class_f1 for r in reports], dtype=np.float64)
    agg = {k: np.array([getattr(r, k) for r in reports], dtype=np.float64) for k in ("ma", "miou", "mf1")}
    seeds = [s for r in reports for s in r.seeds]
    return MetricsReport(
        per_class_f1=[float(v) for v in f1.mean(axis=0)],
        ma=float(agg["ma"].mean()),
        miou=float(agg["miou"].mean()),
        mf1=float(agg["mf1"].mean()),
        ma_std=float(agg["ma"].std()),
        miou_std=float(agg["miou"].std()),
        mf1_std=float(agg["mf1"].std()),
        seeds=sorted(seeds),
    )


@torch.no_grad()
def evaluate_segmentation(model, target: DomainDatasetDescriptor, pixel_masks: list[np.ndarray] | None = None,
                          seed: int | None = None) -> tuple[MetricsReport, np.ndarray]:
    was_training = model.training
    model.eval()
    k = target.class_count
    cm = np.zeros((k, k), dtype=np.int64)
    dtype = next(model.parameters()).dtype
    for i in range(len(target)):
        img = torch.from_numpy(target.load_image(i)).to(dtype)
        probs = model.segment(img, TARGET)
        pred = probs[:k].argmax(dim=0).cpu().numpy()
        h, w = pred.shape
        truth = target.load_mask(i)[:h, :w].copy()
        if pixel_masks is not None:
            truth[~pixel_masks[i][:h, :w]] = IGNORE
        cm += confusion(pred, truth, k)
    model.train(was_training)
    return MetricsReport.from_confusion(cm, seed=seed), cm


@dataclass
class SweepRecord:
    ratio: float
    mse: float | None
    masked_pixels: int
    spectral: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    tensors: list[str] = field(default_factory=list)


@torch.no_grad()
def reconstruction_sweep(model, source: DomainDatasetDescriptor, target: DomainDatasetDescriptor,
                         ratios=(0.5, 0.75, 1.0), seed: int = 0,
                         out_dir: str | Path | None = None) -> list[SweepRecord]:
    """Masked-pixel MSE and per-class spectral statistics at each target masking ratio.

    Source images stay fully unmasked. Image pairs are (source i mod N_S, target i).
    """
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    grid = model.grids[TARGET]
    k = target.class_count
    records = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for ratio in ratios:
        sq_sum, n_pix = 0.0, 0
        rec_vals = [[] for _ in range(k)]
        org_vals = [[] for _ in range(k)]
        paths = []
        for i in range(len(target)):
            src = torch.from_numpy(source.load_image(i % len(source))).to(dtype)
            tgt = torch.from_numpy(target.load_image(i)).to(dtype)
            plan = plan_mask(grid, ratio, seed + i)
            recon = model.reconstruct(src, tgt, plan, strict=False)
            orig = grid.crop(tgt)
            sel = grid.pixel_mask(plan.masked_ids)
            if plan.masked_ids:
                diff = (recon - orig)[:, sel]
                sq_sum += float((diff ** 2).sum() / recon.shape[0])
                n_pix += int(sel.sum())
                truth = torch.from_numpy(target.load_mask(i)[: grid.height, : grid.width].copy())[sel]
                for c in range(k):
                    hit = truth == c
                    if bool(hit.any()):
                        rec_vals[c].append(recon[:, sel][:, hit].cpu().numpy())
                        org_vals[c].append(orig[:, sel][:, hit].cpu().numpy())
            if out is not None:
                name = f"recon_r{int(round(ratio * 100)):03d}_{i:04d}.gt"
                write_tensor(recon.float(), out / name)
                paths.append(name)
        if n_pix == 0:
            warnings.warn(f"ratio {ratio}: no masked patches, MSE undefined", NoMaskedPatchesWarning, stacklevel=2)
            mse = None
        else:
            mse = sq_sum / n_pix
        spectral = {}
        for c in range(k):
            if rec_vals[c]:
                r = np.concatenate(rec_vals[c], axis=1)
                o = np.concatenate(org_vals[c], axis=1)
                spectral[str(c)] = {
                    "recon_mean": r.mean(axis=1).tolist(),
                    "recon_std": r.std(axis=1).tolist(),
                    "orig_mean": o.mean(axis=1).tolist(),
                    "orig_std": o.std(axis=1).tolist(),
                }
        records.append(SweepRecord(float(ratio), mse, n_pix, spectral, paths))
        logger.info("sweep ratio %.2f: masked pixels %d, mse %s", ratio, n_pix, mse)
    model.train(was_training)
    return records
