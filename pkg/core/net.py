"""Feature extractor, segmentation head and generative head.

The feature extractor is: per-domain 1×1 spectral adapter → frozen patch embedding →
frozen transformer core → encoder adapters, and (after grid restoration) decoder
adapters. Both heads share a four-stage upsampler.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from timm.models.vision_transformer import Block
from torch import nn
import torch.nn.functional as F

from core.errors import AdaptedWindowWarning, CheckpointError, GeometryError
from core.logs import get_logger
from core.patchseq import (
    SOURCE,
    TARGET,
    MaskPlan,
    PatchGrid,
    PatchSequence,
    concat_for_mae,
    concat_length,
    patchify,
    recovery_geometry,
    unpatchify,
)
from core.tensorstore import ParamStore

logger = get_logger(__name__)

FROZEN_PREFIXES = ("patch_embed.", "core.")


@dataclass(frozen=True)
class CoreConfig:
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: float = 2.0
    core_channels: int = 6
    patch_size: int = 16

    def validate(self) -> None:
        if self.depth < 1:
            raise GeometryError("core depth must be >= 1")
        if self.embed_dim % self.heads:
            raise GeometryError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class AdapterConfig:
    encoder_adapters: int = 1
    decoder_adapters: int = 1

    def validate(self) -> None:
        if self.encoder_adapters < 1 or self.decoder_adapters < 1:
            raise GeometryError("at least one encoder and one decoder adapter block are required")


@dataclass(frozen=True)
class HeadConfig:
    upsampler_blocks: int
    seg_filters: int
    gen_filters: int

    @classmethod
    def build(cls, blocks: int, source_classes: int, target_classes: int, target_channels: int) -> "HeadConfig":
        return cls(blocks, max(source_classes, target_classes), target_channels)

    def validate(self, core: CoreConfig) -> None:
        check_upsampler(self.upsampler_blocks, core.patch_size)
        if self.seg_filters < 2:
            raise GeometryError("segmentation head needs at least 2 classes")


def check_upsampler(blocks: int, patch_size: int) -> None:
    if blocks < 1 or 2 ** blocks != patch_size:
        raise GeometryError(f"{blocks} x2 upsampler stages cannot restore patch size {patch_size}")


@dataclass(frozen=True)
class DomainGeometry:
    channels: int
    height: int
    width: int
    class_count: int


@dataclass(frozen=True)
class ModelConfig:
    core: CoreConfig = CoreConfig()
    adapters: AdapterConfig = AdapterConfig()
    mask_ratio: float = 0.5
    upsampler_blocks: int = 4

    def validate(self) -> None:
        self.core.validate()
        self.adapters.validate()
        check_upsampler(self.upsampler_blocks, self.core.patch_size)


# --- transformer blocks ------------------------------------------------------

def make_blocks(core: CoreConfig, count: int) -> nn.ModuleList:
    return nn.ModuleList([
        Block(core.embed_dim, core.heads, mlp_ratio=core.mlp_ratio, qkv_bias=True, norm_layer=nn.LayerNorm)
        for _ in range(count)
    ])


def run_blocks(blocks: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
    # token sequences are unbatched (n, d); timm blocks take (B, n, d)
    x = x.unsqueeze(0)
    for blk in blocks:
        x = blk(x)
    return x.squeeze(0)


def attention_weights(attn: nn.Module, x: torch.Tensor) -> torch.Tensor:
    b, n, d = x.shape
    qkv = attn.qkv(x).reshape(b, n, 3, attn.num_heads, d // attn.num_heads).permute(2, 0, 3, 1, 4)
    q, k = qkv[0], qkv[1]
    q = getattr(attn, "q_norm", nn.Identity())(q)
    k = getattr(attn, "k_norm", nn.Identity())(k)
    return ((q @ k.transpose(-2, -1)) * attn.scale).softmax(dim=-1)


def record_attention(block: Block, sink: list):
    """Append the block's attention map to ``sink`` on every forward; returns the hook handle."""
    def hook(module, args):
        with torch.no_grad():
            sink.append(attention_weights(module, args[0]))
    return block.attn.register_forward_pre_hook(hook)


def upsampler_schedule(embed_dim: int, blocks: int) -> list[int]:
    return [max(1, embed_dim // 2 ** i) for i in range(blocks + 1)]


class RecoveryWindow(nn.Module):
    """Learned K'-tap window over the sequence axis with full d→d channel mixing."""

    def __init__(self, dim: int, kernel: int, stride: int = 1):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv1d(dim, dim, kernel_size=kernel, stride=stride)
        self.reset_identity()

    def reset_identity(self) -> None:
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()
            centre = self.kernel // 2
            self.conv.weight[:, :, centre].copy_(torch.eye(self.conv.in_channels))

    def fitted_weight(self, kernel: int) -> torch.Tensor:
        w = self.conv.weight
        if kernel == self.kernel:
            return w
        out = w.new_zeros(w.shape[0], w.shape[1], kernel)
        shift = self.kernel // 2 - kernel // 2
        for j in range(kernel):
            src = j + shift
            if 0 <= src < self.kernel:
                out[:, :, j] = w[:, :, src]
        return out

    def forward(self, x: torch.Tensor, kernel: int | None = None) -> torch.Tensor:
        # x: (n, d) -> (n - K' + 1, d)
        weight = self.conv.weight if kernel is None else self.fitted_weight(kernel)
        y = F.conv1d(x.t().unsqueeze(0), weight, self.conv.bias, stride=self.stride)
        return y.squeeze(0).t()


class GeoAdaptNet(nn.Module):
    def __init__(self, cfg: ModelConfig, source: DomainGeometry, target: DomainGeometry):
        super().__init__()
        core = cfg.core
        cfg.validate()
        self.cfg = cfg
        self.domains = {SOURCE: source, TARGET: target}
        self.grids = {
            name: PatchGrid.for_image(g.height, g.width, core.patch_size) for name, g in self.domains.items()
        }
        self.heads_cfg = HeadConfig.build(cfg.upsampler_blocks, source.class_count, target.class_count, target.channels)
        self.heads_cfg.validate(core)

        d = core.embed_dim
        self.spectral = nn.ModuleDict({
            name: nn.Conv2d(g.channels, core.core_channels, kernel_size=1) for name, g in self.domains.items()
        })
        self.patch_embed = nn.Conv2d(core.core_channels, d, kernel_size=core.patch_size, stride=core.patch_size)
        self.pos = nn.ParameterDict({
            name: nn.Parameter(torch.zeros(grid.n_patches, d)) for name, grid in self.grids.items()
        })
        self.core = make_blocks(core, core.depth)
        self.enc_adapters = make_blocks(core, cfg.adapters.encoder_adapters)
        self.dec_adapters = make_blocks(core, cfg.adapters.decoder_adapters)
        self.dec_norm = nn.LayerNorm(d)

        n_src, n_tgt = self.grids[SOURCE].n_patches, self.grids[TARGET].n_patches
        self.concat_len = concat_length(n_src, n_tgt, cfg.mask_ratio)
        kernel, stride = recovery_geometry(self.concat_len, n_tgt)
        self.recovery = RecoveryWindow(d, kernel, stride)

        chans = upsampler_schedule(d, self.heads_cfg.upsampler_blocks)
        self.upsampler = nn.ModuleList([
            nn.Sequential(
                nn.ConvTranspose2d(chans[i], chans[i + 1], kernel_size=2, stride=2),
                nn.Conv2d(chans[i + 1], chans[i + 1], kernel_size=3, padding=1),
                nn.BatchNorm2d(chans[i + 1], momentum=0.1),
            )
            for i in range(self.heads_cfg.upsampler_blocks)
        ])
        self.seg_head = nn.Conv2d(chans[-1], self.heads_cfg.seg_filters, kernel_size=1)
        self.gen_head = nn.Conv2d(chans[-1], self.heads_cfg.gen_filters, kernel_size=1)

        self.apply(init_weights)
        for p in self.pos.values():
            nn.init.trunc_normal_(p, std=0.02)
        self.recovery.reset_identity()
        self.freeze_core()

    # -- partition ------------------------------------------------------------
    def freeze_core(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad = not name.startswith(FROZEN_PREFIXES)

    @staticmethod
    def is_frozen(name: str) -> bool:
        return name.startswith(FROZEN_PREFIXES)

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not self.is_frozen(n)]

    def frozen_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if self.is_frozen(n)]

    # -- flows ----------------------------------------------------------------
    def _check_domain(self, domain: str) -> DomainGeometry:
        if domain not in self.domains:
            raise GeometryError(f"unregistered domain {domain!r}")
        return self.domains[domain]

    def spectral_adapt(self, img: torch.Tensor, domain: str) -> torch.Tensor:
        geom = self._check_domain(domain)
        if img.shape[0] != geom.channels:
            raise GeometryError(f"{domain} adapter expects {geom.channels} channels, got {img.shape[0]}")
        return self.spectral[domain](img.unsqueeze(0)).squeeze(0)

    def embed(self, img: torch.Tensor, domain: str) -> PatchSequence:
        x = self.spectral_adapt(img, domain)
        grid = self.grids[domain]
        if PatchGrid.for_image(x.shape[-2], x.shape[-1], grid.patch_size) != grid:
            raise GeometryError(f"{domain} image {tuple(x.shape[-2:])} does not match the registered grid")
        return patchify(x, grid, self.patch_embed, self.pos[domain], domain)

    def encode(self, seq: PatchSequence) -> PatchSequence:
        x = run_blocks(self.enc_adapters, run_blocks(self.core, seq.embeddings))
        return seq.with_embeddings(x)

    def recover_target_sequence(self, enc: PatchSequence, n_target: int, strict: bool = True) -> PatchSequence:
        kernel, _ = recovery_geometry(len(enc), n_target)
        if kernel != self.recovery.kernel:
            if strict:
                raise GeometryError(
                    f"geometry mismatch with configured masking ratio: window {self.recovery.kernel}, "
                    f"sequence needs {kernel}"
                )
            warnings.warn(
                f"recovery window resized from {self.recovery.kernel} to {kernel} taps",
                AdaptedWindowWarning, stacklevel=2,
            )
        out = self.recovery(enc.embeddings, kernel)
        grid = self.grids[TARGET]
        return PatchSequence(out + self.pos[TARGET], grid.positions(), (TARGET,) * grid.n_patches)

    def decode(self, seq: PatchSequence, grid: PatchGrid) -> torch.Tensor:
        x = self.dec_norm(run_blocks(self.dec_adapters, seq.embeddings))
        fmap = unpatchify(seq.with_embeddings(x), grid).unsqueeze(0)
        for stage in self.upsampler:
            fmap = stage(fmap)
        return fmap

    def segment_logits(self, img: torch.Tensor, domain: str) -> torch.Tensor:
        seq = self.encode(self.embed(img, domain))
        return self.seg_head(self.decode(seq, self.grids[domain])).squeeze(0)

    def segment(self, img: torch.Tensor, domain: str) -> torch.Tensor:
        """Per-pixel class distribution, shape (F_seg, grid_h·p, grid_w·p)."""
        return self.segment_logits(img, domain).softmax(dim=0)

    def reconstruct(self, src_img: torch.Tensor, tgt_img: torch.Tensor, plan: MaskPlan,
                    strict: bool = True) -> torch.Tensor:
        """Target reconstruction (C_T, H_T', W_T') from the source plus unmasked target patches."""
        grid = self.grids[TARGET]
        if plan.n_patches != grid.n_patches:
            raise GeometryError(f"mask plan covers {plan.n_patches} patches, target grid has {grid.n_patches}")
        src = self.embed(src_img, SOURCE)
        tgt = self.embed(tgt_img, TARGET).select(plan.unmasked_ids)
        enc = self.encode(concat_for_mae(src, tgt))
        rec = self.recover_target_sequence(enc, grid.n_patches, strict=strict)
        return self.gen_head(self.decode(rec, grid)).squeeze(0)

    # -- persistence ------------------------------------------------------------
    def param_store(self) -> ParamStore:
        tensors = {}
        for name, t in self.state_dict().items():
            arr = t.detach().cpu().numpy()
            if arr.dtype == np.int64:
                arr = arr.astype(np.int32)
            elif arr.dtype == np.float64:
                arr = arr.astype(np.float32)
            tensors[name] = arr.copy()
        frozen = frozenset(n for n in tensors if self.is_frozen(n))
        return ParamStore(tensors=tensors, frozen=frozen)

    def load_param_store(self, store: ParamStore, only_core: bool = False) -> None:
        own = self.state_dict()
        names = [n for n in own if self.is_frozen(n)] if only_core else list(own)
        missing = [n for n in names if n not in store.tensors]
        if missing:
            raise CheckpointError(f"missing parameter {missing[0]!r}")
        with torch.no_grad():
            for n in names:
                src = torch.from_numpy(np.asarray(store.tensors[n]))
                if tuple(src.shape) != tuple(own[n].shape):
                    raise CheckpointError(f"shape mismatch for {n}: {tuple(src.shape)} vs {tuple(own[n].shape)}")
                own[n].copy_(src.to(own[n].dtype))


def init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d) and m.kernel_size == m.stride and m.kernel_size != (1, 1):
        # patch embedding: a linear projection of each flattened block
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
