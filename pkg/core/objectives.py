"""Loss terms: pixel cross-entropy, masked-patch reconstruction MSE, normalised entropy."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import torch

from core.errors import DivergenceError, EmptySupervisionError, GeometryError, NoMaskedPatchesWarning
from core.logs import get_logger
from core.patchseq import MaskPlan, PatchGrid
from core.tensorstore import IGNORE

logger = get_logger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_da: float = 1.0
    lambda_mae: float = 1.0
    seg: float = 1.0

    def __post_init__(self):
        for name, v in (("lambda_da", self.lambda_da), ("lambda_mae", self.lambda_mae), ("seg", self.seg)):
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    seg: float
    da: float
    mae: float
    total: float
    counts: dict[str, int] = field(default_factory=dict)
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def to_record(self, step: int | None = None) -> dict:
        rec = asdict(self)
        rec.pop("tensor")
        if step is not None:
            rec["step"] = step
        return rec


def seg_loss(pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean −log p[y] over labelled pixels; pred is (K, H, W), mask (H, W) with IGNORE."""
    mask = torch.as_tensor(mask, dtype=torch.long, device=pred.device)
    if mask.shape != pred.shape[1:]:
        raise GeometryError(f"prediction {tuple(pred.shape[1:])} and mask {tuple(mask.shape)} differ")
    labelled = mask != IGNORE
    if not bool(labelled.any()):
        raise EmptySupervisionError("empty supervision: no labelled pixels")
    probs = pred.flatten(1)[:, labelled.flatten()]
    truth = mask[labelled]
    p_true = probs.gather(0, truth.unsqueeze(0)).squeeze(0)
    return -torch.log(p_true.clamp_min(PROB_FLOOR)).mean()


def mae_loss(recon: torch.Tensor, target: torch.Tensor, plan: MaskPlan, grid: PatchGrid) -> torch.Tensor:
    if recon.shape != target.shape:
        raise GeometryError(f"reconstruction {tuple(recon.shape)} and target {tuple(target.shape)} differ")
    if not plan.masked_ids:
        warnings.warn("no masked patches; reconstruction loss is 0", NoMaskedPatchesWarning, stacklevel=2)
        return recon.new_zeros(())
    sel = grid.pixel_mask(plan.masked_ids).to(recon.device)
    diff = (recon - target)[:, sel]
    return (diff ** 2).sum(dim=0).mean() / recon.shape[0]


def da_loss(pred: torch.Tensor) -> torch.Tensor:
    k = pred.shape[0]
    if k < 2:
        raise GeometryError("entropy alignment needs at least 2 classes")
    ent = -(pred * torch.log(pred.clamp_min(PROB_FLOOR))).sum(dim=0)
    return ent.mean() / math.log(k)


def total_loss(parts: dict[str, torch.Tensor | float], weights: LossWeights,
               counts: dict[str, int] | None = None, step: int | None = None) -> LossBreakdown:
    terms = {}
    for name in ("seg", "da", "mae"):
        v = parts.get(name, 0.0)
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise DivergenceError(name, step=step, value=value)
        terms[name] = (v, value)
    total = (weights.seg * terms["seg"][0] + weights.lambda_da * terms["da"][0]
             + weights.lambda_mae * terms["mae"][0])
    total_value = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    if not math.isfinite(total_value):
        raise DivergenceError("total", step=step, value=total_value)
    return LossBreakdown(
        seg=terms["seg"][1],
        da=terms["da"][1],
        mae=terms["mae"][1],
        total=total_value,
        counts=dict(counts or {}),
        tensor=total if isinstance(total, torch.Tensor) else None,
    )
