"""Optimisation loop, labelled-budget selection, model selection, seed fan-out,
the four-configuration ablation and single-domain core pretraining."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from core.errors import AbsentClassWarning, CheckpointError, ConfigError, DatasetError
from core.evalmetrics import MetricsReport, aggregate_seeds, evaluate_segmentation, reconstruction_sweep
from core.exporter import append_jsonl, write_report_json
from core.logs import get_logger
from core.metadata import RunInfo, run_root
from core.net import (
    FROZEN_PREFIXES,
    CoreConfig,
    DomainGeometry,
    GeoAdaptNet,
    ModelConfig,
    init_weights,
    make_blocks,
    run_blocks,
)
from core.objectives import PROB_FLOOR, LossBreakdown, LossWeights, da_loss, mae_loss, seg_loss, total_loss
from core.patchseq import SOURCE, TARGET, MaskPlan, PatchGrid, plan_mask
from core.synthgeo import sample_labeled_pixels
from core.tensorstore import (
    IGNORE,
    OPTIM_PREFIX,
    DomainDatasetDescriptor,
    ParamStore,
    load_checkpoint,
    save_checkpoint,
)

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "geoadapt-checkpoint/1"
LOG_FILE = "log.jsonl"
BEST_CKPT = "best.ckpt"
FINAL_CKPT = "final.ckpt"
REPORT_FILE = "report.json"

# (column name, lambda_da on/off, lambda_mae on/off)
ABLATION = (
    ("L_Seg", 0, 0),
    ("L_Seg+L_DA", 1, 0),
    ("L_Seg+L_MAE", 0, 1),
    ("L_Seg+L_DA+L_MAE", 1, 1),
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    steps: int = 2000
    eval_every: int = 100
    mask_ratio: float = 0.5
    weights: LossWeights = LossWeights()
    seeds: tuple[int, ...] = (0,)
    budget_per_class: int = 50
    grad_accum: int = 1
    val_fraction: float = 0.1

    @property
    def seg_weight(self) -> float:
        return self.weights.seg

    @property
    def selection(self) -> str:
        return "val_mse" if self.weights.seg == 0 else "miou"

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1]")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.steps < 1 or self.eval_every < 1 or self.grad_accum < 1:
            raise ConfigError("steps, eval_every and grad_accum must be >= 1")
        if self.budget_per_class < 0:
            raise ConfigError("budget_per_class must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction {self.val_fraction} outside (0, 1)")
        w = self.weights
        if w.seg == 0 and w.lambda_mae == 0:
            raise ConfigError("seg_weight 0 needs lambda_mae > 0 (generative-only training)")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 300
    mask_ratio: float = 0.75
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("pretrain steps must be >= 1")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ConfigError(f"pretrain mask_ratio {self.mask_ratio} outside (0, 1]")
        if not self.learning_rate > 0:
            raise ConfigError("pretrain learning_rate must be > 0")


@dataclass
class RunRecord:
    seed: int
    selection: str
    log: list[dict] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_miou: float | None = None
    best_val_mse: float | None = None
    best_checkpoint: str | None = None
    final_checkpoint: str | None = None
    run_dir: str | None = None
    test: MetricsReport | None = None
    best_store: ParamStore | None = field(default=None, repr=False)

    def to_report(self, config_digest: str = "") -> dict:
        return {
            "seed": self.seed,
            "config_digest": config_digest,
            "selection": self.selection,
            "best_step": self.best_step,
            "best_miou": self.best_miou,
            "best_val_mse": self.best_val_mse,
            "evaluations": self.evaluations,
            "test": None if self.test is None else self.test.to_dict(),
        }


# --- data plumbing -------------------------------------------------------------

def domain_geometry(desc: DomainDatasetDescriptor) -> DomainGeometry:
    if not len(desc):
        raise DatasetError(f"{desc.domain}: no images")
    shapes = {tuple(s) for s in desc.shapes}
    if len(shapes) != 1:
        raise DatasetError(f"{desc.domain}: images must share one size, got {sorted(shapes)}")
    h, w = shapes.pop()
    return DomainGeometry(desc.channel_count, h, w, desc.class_count)


def build_model(source: DomainDatasetDescriptor, target: DomainDatasetDescriptor, model_cfg: ModelConfig,
                seed: int, core_store: ParamStore | None = None) -> GeoAdaptNet:
    torch.manual_seed(seed)
    model = GeoAdaptNet(model_cfg, domain_geometry(source), domain_geometry(target))
    if core_store is not None:
        model.load_param_store(core_store, only_core=True)
    return model


def select_target_labels(target: DomainDatasetDescriptor, budget_per_class: int,
                         seed: int) -> list[tuple[int, int, int]]:
    """Per-class uniform sample of target pixels; absent classes get zero budget."""
    masks = [target.load_mask(i) for i in range(len(target))]
    picked = sample_labeled_pixels(masks, target.class_count, budget_per_class, seed)
    if budget_per_class > 0:
        got = {c for _, _, c in picked}
        absent = [c for c in range(target.class_count) if c not in got]
        if absent:
            warnings.warn(f"classes {absent} absent from the target; zero budget recorded",
                          AbsentClassWarning, stacklevel=2)
            logger.warning("target classes %s absent, zero budget recorded", absent)
    return picked


def split_target_pixels(target: DomainDatasetDescriptor, labeled_budget, seed: int,
                        val_fraction: float = 0.1) -> tuple[list[np.ndarray], list[np.ndarray]]:
    masks = [target.load_mask(i) for i in range(len(target))]
    budget = [np.zeros(m.size, dtype=bool) for m in masks]
    for img, pix, _ in labeled_budget:
        budget[img][pix] = True
    cand = [np.nonzero((m.ravel() != IGNORE) & ~b)[0] for m, b in zip(masks, budget)]
    total = sum(len(c) for c in cand)
    n_val = int(math.floor(val_fraction * total + 0.5))
    rng = np.random.default_rng([seed, 1])
    flags = np.zeros(total, dtype=bool)
    flags[rng.permutation(total)[:n_val]] = True
    val, test, start = [], [], 0
    for m, c in zip(masks, cand):
        f = flags[start:start + len(c)]
        start += len(c)
        v = np.zeros(m.size, dtype=bool)
        t = np.zeros(m.size, dtype=bool)
        v[c[f]] = True
        t[c[~f]] = True
        val.append(v.reshape(m.shape))
        test.append(t.reshape(m.shape))
    return val, test


def pair_schedule(n_source: int, n_target: int, seed: int):
    rng = np.random.default_rng([seed, 2])
    while True:
        ps, pt = rng.permutation(n_source), rng.permutation(n_target)
        for j in range(max(n_source, n_target)):
            yield int(ps[j % n_source]), int(pt[j % n_target])


def plan_seed(seed: int, step: int, micro: int = 0) -> int:
    return seed * 1_000_003 + step * 997 + micro


def target_distribution(pred: torch.Tensor, class_count: int) -> torch.Tensor:
    if pred.shape[0] == class_count:
        return pred
    q = pred[:class_count]
    return q / q.sum(dim=0, keepdim=True).clamp_min(PROB_FLOOR)


def step_losses(model: GeoAdaptNet, src_img, src_mask, tgt_img, tgt_budget, cfg: TrainConfig,
                mask_seed: int, step: int | None = None) -> LossBreakdown:
    w = cfg.weights
    grid_s, grid_t = model.grids[SOURCE], model.grids[TARGET]
    parts: dict[str, torch.Tensor] = {}
    counts: dict[str, int] = {}
    p_tgt = None
    if w.seg > 0:
        src_labels = grid_s.crop(src_mask)
        terms = [seg_loss(model.segment(src_img, SOURCE), src_labels)]
        tgt_labels = grid_t.crop(tgt_budget)
        n_tgt = int((tgt_labels != IGNORE).sum())
        if n_tgt:
            p_tgt = model.segment(tgt_img, TARGET)
            terms.append(seg_loss(p_tgt, tgt_labels))
        parts["seg"] = sum(terms) / len(terms)
        counts["seg_source"] = int((src_labels != IGNORE).sum())
        counts["seg_target"] = n_tgt
    if w.lambda_da > 0:
        if p_tgt is None:
            p_tgt = model.segment(tgt_img, TARGET)
        parts["da"] = da_loss(target_distribution(p_tgt, model.domains[TARGET].class_count))
        counts["da"] = int(p_tgt[0].numel())
    if w.lambda_mae > 0:
        plan = plan_mask(grid_t, cfg.mask_ratio, mask_seed)
        recon = model.reconstruct(src_img, tgt_img, plan)
        parts["mae"] = mae_loss(recon, grid_t.crop(tgt_img), plan, grid_t)
        counts["mae"] = len(plan.masked_ids) * grid_t.patch_size ** 2
    return total_loss(parts, w, counts=counts, step=step)


def _mean_record(parts: list[LossBreakdown], step: int) -> dict:
    rec = {k: sum(getattr(b, k) for b in parts) / len(parts) for k in ("seg", "da", "mae", "total")}
    counts: dict[str, int] = {}
    for b in parts:
        for k, v in b.counts.items():
            counts[k] = counts.get(k, 0) + v
    rec["counts"] = counts
    rec["step"] = step
    return rec


# --- checkpoints -----------------------------------------------------------------

def run_store(model: GeoAdaptNet, optimizer: torch.optim.Optimizer | None = None) -> ParamStore:
    store = model.param_store()
    if optimizer is not None:
        for name, p in model.trainable_parameters():
            for slot, v in optimizer.state.get(p, {}).items():
                arr = torch.as_tensor(v).detach().cpu().numpy()
                store.optimizer[f"{OPTIM_PREFIX}{name}.{slot}"] = np.asarray(arr, dtype=np.float32).copy()
    return store


def restore_optimizer(model: GeoAdaptNet, optimizer: torch.optim.Optimizer, store: ParamStore) -> None:
    params = dict(model.trainable_parameters())
    for key, arr in store.optimizer.items():
        name, slot = key[len(OPTIM_PREFIX):].rsplit(".", 1)
        if name not in params:
            raise CheckpointError(f"optimizer entry {key!r} names no trainable parameter")
        p = params[name]
        t = torch.from_numpy(np.array(arr))
        optimizer.state[p][slot] = t.reshape(()) if slot == "step" else t.to(p.dtype).reshape(p.shape)


def load_run_checkpoint(path, model: GeoAdaptNet, optimizer: torch.optim.Optimizer | None = None,
                        config_digest: str | None = None, strict: bool = False) -> ParamStore:
    store = load_checkpoint(path, expected_names=model.state_dict().keys(),
                            config_digest=config_digest, strict=strict)
    model.load_param_store(store)
    if optimizer is not None:
        restore_optimizer(model, optimizer, store)
    return store


def make_optimizer(model: GeoAdaptNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [p for _, p in model.trainable_parameters()],
        lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
    )


# --- training ---------------------------------------------------------------------

def validation_mse(model: GeoAdaptNet, source, target, ratio: float, seed: int) -> float:
    rec = reconstruction_sweep(model, source, target, ratios=(ratio,), seed=seed)[0]
    return float("inf") if rec.mse is None else rec.mse


def evaluate_run(model: GeoAdaptNet, target: DomainDatasetDescriptor, cfg: TrainConfig,
                 seed: int) -> MetricsReport:
    labeled = select_target_labels(target, cfg.budget_per_class, seed)
    _, test = split_target_pixels(target, labeled, seed, cfg.val_fraction)
    report, _ = evaluate_segmentation(model, target, test, seed=seed)
    return report


def train(source: DomainDatasetDescriptor, target: DomainDatasetDescriptor, cfg: TrainConfig,
          model_cfg: ModelConfig | None = None, seed: int | None = None, out_dir=None,
          core_store: ParamStore | None = None, config_digest: str = "",
          progress: bool = False) -> RunRecord:
    """One seeded run. With ``out_dir`` set, writes log.jsonl, best/final checkpoints and report.json."""
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    model_cfg = replace(model_cfg or ModelConfig(), mask_ratio=cfg.mask_ratio)
    model = build_model(source, target, model_cfg, seed, core_store)
    labeled = select_target_labels(target, cfg.budget_per_class, seed)
    run_target = replace(target, labeled_budget=labeled)
    val_masks, _ = split_target_pixels(target, labeled, seed, cfg.val_fraction)

    dtype = next(model.parameters()).dtype
    src_imgs = [torch.from_numpy(source.load_image(i)).to(dtype) for i in range(len(source))]
    src_masks = [torch.from_numpy(source.load_mask(i)).long() for i in range(len(source))]
    tgt_imgs = [torch.from_numpy(target.load_image(i)).to(dtype) for i in range(len(target))]
    tgt_budget = [torch.from_numpy(run_target.budget_mask(i)).long() for i in range(len(target))]

    out = Path(out_dir) if out_dir is not None else None
    record = RunRecord(seed=seed, selection=cfg.selection)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        record.run_dir = str(out)
        (out / LOG_FILE).write_text("", encoding="utf-8")

    optimizer = make_optimizer(model, cfg)
    pairs = pair_schedule(len(src_imgs), len(tgt_imgs), seed)
    best = None
    logger.info("seed %d: training %d steps (selection by %s, %d budget pixels)",
                seed, cfg.steps, cfg.selection, len(labeled))
    model.train()
    for step in tqdm(range(1, cfg.steps + 1), desc=f"seed {seed}", disable=not progress, leave=False):
        optimizer.zero_grad(set_to_none=True)
        parts = []
        for micro in range(cfg.grad_accum):
            i_s, i_t = next(pairs)
            bd = step_losses(model, src_imgs[i_s], src_masks[i_s], tgt_imgs[i_t], tgt_budget[i_t],
                             cfg, plan_seed(seed, step, micro), step)
            if bd.tensor is not None and bd.tensor.requires_grad:
                (bd.tensor / cfg.grad_accum).backward()
            parts.append(bd)
        optimizer.step()
        rec = _mean_record(parts, step)
        record.log.append(rec)
        if out is not None:
            append_jsonl(out / LOG_FILE, rec)

        if step % cfg.eval_every == 0 or step == cfg.steps:
            if cfg.selection == "miou":
                value = evaluate_segmentation(model, target, val_masks, seed=seed)[0].miou
                improved = best is None or value > best
            else:
                value = validation_mse(model, source, target, cfg.mask_ratio, seed)
                improved = best is None or value < best
            record.evaluations.append({"step": step, cfg.selection: value})
            logger.info("seed %d step %d: validation %s %.4f%s", seed, step, cfg.selection, value,
                        " (best)" if improved else "")
            if improved:
                best = value
                record.best_step = step
                record.best_store = run_store(model, optimizer)
                if out is not None:
                    path = out / BEST_CKPT
                    save_checkpoint(record.best_store, _manifest(seed, step, cfg, value, config_digest), path)
                    record.best_checkpoint = str(path)

    if cfg.selection == "miou":
        record.best_miou = best
    else:
        record.best_val_mse = best
    if out is not None:
        path = out / FINAL_CKPT
        save_checkpoint(run_store(model, optimizer), _manifest(seed, cfg.steps, cfg, None, config_digest), path)
        record.final_checkpoint = str(path)

    model.load_param_store(record.best_store)
    _, test_masks = split_target_pixels(target, labeled, seed, cfg.val_fraction)
    record.test, _ = evaluate_segmentation(model, target, test_masks, seed=seed)
    logger.info("seed %d: best step %d, test mIoU %.4f", seed, record.best_step, record.test.miou)
    if out is not None:
        write_report_json(out / REPORT_FILE, record.to_report(config_digest))
    return record


def _manifest(seed: int, step: int, cfg: TrainConfig, value, digest: str) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "seed": seed,
        "step": step,
        "selection": cfg.selection,
        "value": value,
        "config_digest": digest,
    }


def _train_job(job: dict) -> RunRecord:
    return train(**job)


def train_seeds(source, target, cfg: TrainConfig, model_cfg: ModelConfig | None = None, out_dir=None,
                core_store: ParamStore | None = None, config_digest: str = "", label: str = "",
                workers: int = 1, progress: bool = False) -> list[RunRecord]:
    jobs = []
    for seed in cfg.seeds:
        run_dir = None
        if out_dir is not None:
            run_dir = run_root(out_dir, RunInfo("train", seed, label, config_digest))
        jobs.append(dict(source=source, target=target, cfg=cfg, model_cfg=model_cfg, seed=seed,
                         out_dir=run_dir, core_store=core_store, config_digest=config_digest,
                         progress=progress and workers == 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


def zero_shot_config(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, weights=LossWeights(0.0, 0.0, cfg.weights.seg or 1.0), budget_per_class=0)


def ablation_configs(cfg: TrainConfig) -> dict[str, TrainConfig]:
    w = cfg.weights
    return {
        name: replace(cfg, weights=LossWeights(w.lambda_da * da, w.lambda_mae * mae, 1.0))
        for name, da, mae in ABLATION
    }


def ablate(source, target, cfg: TrainConfig, model_cfg: ModelConfig | None = None, out_dir=None,
           core_store: ParamStore | None = None, config_digest: str = "", workers: int = 1,
           progress: bool = False) -> dict[str, MetricsReport]:
    columns = {}
    for name, run_cfg in ablation_configs(cfg).items():
        logger.info("ablation column %s: lambda_da=%g lambda_mae=%g", name,
                    run_cfg.weights.lambda_da, run_cfg.weights.lambda_mae)
        records = train_seeds(source, target, run_cfg, model_cfg, out_dir, core_store, config_digest,
                              label=name, workers=workers, progress=progress)
        columns[name] = aggregate_seeds([r.test for r in records])
    return columns


# --- core pretraining ----------------------------------------------------------------

class CorePretrainer(nn.Module):
    """Single-domain masked-patch reconstruction around the shared patch embedding and core.

    Masked tokens are replaced by a learned mask token; a linear head predicts the
    pixels of every patch. Parameter names under ``patch_embed.`` and ``core.`` match
    :class:`GeoAdaptNet`.
    """

    def __init__(self, core: CoreConfig, channels: int, height: int, width: int):
        super().__init__()
        core.validate()
        d, p = core.embed_dim, core.patch_size
        self.channels = channels
        self.grid = PatchGrid.for_image(height, width, p)
        self.spectral = nn.Conv2d(channels, core.core_channels, kernel_size=1)
        self.patch_embed = nn.Conv2d(core.core_channels, d, kernel_size=p, stride=p)
        self.pos = nn.Parameter(torch.zeros(self.grid.n_patches, d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.core = make_blocks(core, core.depth)
        self.norm = nn.LayerNorm(d)
        self.pixel_head = nn.Linear(d, channels * p * p)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.pos, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def forward(self, img: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        g = self.grid
        x = self.spectral(g.crop(img).unsqueeze(0))
        tokens = self.patch_embed(x).flatten(2).squeeze(0).transpose(0, 1)
        if plan.masked_ids:
            hide = torch.zeros(g.n_patches, 1, dtype=torch.bool)
            hide[list(plan.masked_ids)] = True
            tokens = torch.where(hide, self.mask_token.expand_as(tokens), tokens)
        x = run_blocks(self.core, tokens + self.pos)
        out = self.pixel_head(self.norm(x))
        p = g.patch_size
        return out.view(g.grid_h, g.grid_w, self.channels, p, p).permute(2, 0, 3, 1, 4).reshape(
            self.channels, g.height, g.width)

    def core_store(self) -> ParamStore:
        tensors = {
            n: t.detach().cpu().numpy().astype(np.float32).copy()
            for n, t in self.state_dict().items() if n.startswith(FROZEN_PREFIXES)
        }
        return ParamStore(tensors=tensors, frozen=frozenset(tensors))


@torch.no_grad()
def pretrainer_mse(net: CorePretrainer, dataset: DomainDatasetDescriptor, mask_ratio: float,
                   seed: int) -> float:
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    total = 0.0
    for i in range(len(dataset)):
        img = torch.from_numpy(dataset.load_image(i)).to(dtype)
        plan = plan_mask(net.grid, mask_ratio, seed + i)
        total += float(mae_loss(net(img, plan), net.grid.crop(img), plan, net.grid))
    net.train(was_training)
    return total / len(dataset)


def fit_pretrainer(dataset: DomainDatasetDescriptor, model_cfg: ModelConfig, cfg: PretrainConfig,
                   progress: bool = False) -> CorePretrainer:
    cfg.validate()
    geom = domain_geometry(dataset)
    torch.manual_seed(cfg.seed)
    net = CorePretrainer(model_cfg.core, geom.channels, geom.height, geom.width)
    optimizer = torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate, weight_decay=0.01)
    imgs = [torch.from_numpy(dataset.load_image(i)) for i in range(len(dataset))]
    rng = np.random.default_rng([cfg.seed, 3])
    weights = LossWeights(lambda_da=0.0, lambda_mae=1.0, seg=0.0)
    net.train()
    for step in tqdm(range(1, cfg.steps + 1), desc="pretrain", disable=not progress, leave=False):
        img = imgs[int(rng.integers(len(imgs)))]
        plan = plan_mask(net.grid, cfg.mask_ratio, plan_seed(cfg.seed, step))
        loss = mae_loss(net(img, plan), net.grid.crop(img), plan, net.grid)
        total_loss({"mae": loss}, weights, step=step)
        if not loss.requires_grad:
            continue
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    logger.info("core pretraining finished after %d steps on %s", cfg.steps, dataset.domain)
    return net


def pretrain_core(dataset: DomainDatasetDescriptor, model_cfg: ModelConfig, cfg: PretrainConfig,
                  progress: bool = False) -> ParamStore:
    net = fit_pretrainer(dataset, model_cfg, cfg, progress)
    store = net.core_store()
    store.manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": "core",
        "steps": cfg.steps,
        "mask_ratio": cfg.mask_ratio,
        "seed": cfg.seed,
    }
    return store
