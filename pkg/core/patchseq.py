"""Patch grids, random masking, sequence concatenation and recovery geometry."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from core.errors import GeometryError

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid_h: int
    grid_w: int

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if patch_size < 1:
            raise GeometryError("patch_size must be >= 1")
        if height < patch_size or width < patch_size:
            raise GeometryError(f"image {height}x{width} is smaller than one {patch_size}x{patch_size} patch")
        return cls(patch_size, height // patch_size, width // patch_size)

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def height(self) -> int:
        return self.grid_h * self.patch_size

    @property
    def width(self) -> int:
        return self.grid_w * self.patch_size

    def positions(self) -> torch.Tensor:
        rows = torch.arange(self.grid_h).repeat_interleave(self.grid_w)
        cols = torch.arange(self.grid_w).repeat(self.grid_h)
        return torch.stack([rows, cols], dim=1)

    def crop(self, img: torch.Tensor) -> torch.Tensor:
        return img[..., : self.height, : self.width]

    def pixel_mask(self, patch_ids) -> torch.Tensor:
        flags = torch.zeros(self.n_patches, dtype=torch.bool)
        if len(patch_ids):
            flags[torch.as_tensor(list(patch_ids), dtype=torch.long)] = True
        p = self.patch_size
        return flags.view(self.grid_h, self.grid_w).repeat_interleave(p, 0).repeat_interleave(p, 1)


def masked_count(ratio: float, n_patches: int) -> int:
    return int(math.floor(ratio * n_patches + 0.5))


@dataclass(frozen=True)
class MaskPlan:
    ratio: float
    masked_ids: tuple[int, ...]
    unmasked_ids: tuple[int, ...]
    seed: int

    @property
    def n_patches(self) -> int:
        return len(self.masked_ids) + len(self.unmasked_ids)


def plan_mask(grid: PatchGrid, ratio: float, seed: int) -> MaskPlan:
    if not 0.0 <= ratio <= 1.0:
        raise GeometryError(f"masking ratio {ratio} outside [0, 1]")
    n = grid.n_patches
    k = masked_count(ratio, n)
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.permutation(n)[:k])
    keep = np.setdiff1d(np.arange(n), masked)
    return MaskPlan(ratio, tuple(int(i) for i in masked), tuple(int(i) for i in keep), seed)


@dataclass
class PatchSequence:
    embeddings: torch.Tensor  # (n, d)
    positions: torch.Tensor  # (n, 2) long
    domain_tags: tuple[str, ...]

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if self.positions.shape[0] != n or len(self.domain_tags) != n:
            raise GeometryError("embeddings, positions and tags disagree in length")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def select(self, ids) -> "PatchSequence":
        idx = torch.as_tensor(list(ids), dtype=torch.long)
        return PatchSequence(
            self.embeddings.index_select(0, idx),
            self.positions.index_select(0, idx),
            tuple(self.domain_tags[i] for i in idx.tolist()),
        )

    def with_embeddings(self, embeddings: torch.Tensor) -> "PatchSequence":
        return PatchSequence(embeddings, self.positions, self.domain_tags)


def patchify(img: torch.Tensor, grid: PatchGrid, embed: nn.Conv2d, pos_table: torch.Tensor,
             domain: str = SOURCE) -> PatchSequence:
    if img.shape[-2] < grid.patch_size or img.shape[-1] < grid.patch_size:
        raise GeometryError("image smaller than one patch")
    if img.shape[0] != embed.in_channels:
        raise GeometryError(f"image has {img.shape[0]} channels, embedding expects {embed.in_channels}")
    x = embed(grid.crop(img).unsqueeze(0))  # (1, d, gh, gw)
    tokens = x.flatten(2).squeeze(0).transpose(0, 1)
    return PatchSequence(tokens + pos_table, grid.positions(), (domain,) * grid.n_patches)


def unpatchify(seq: PatchSequence, grid: PatchGrid) -> torch.Tensor:
    out = seq.embeddings.new_zeros(grid.grid_h, grid.grid_w, seq.dim)
    out = out.index_put((seq.positions[:, 0], seq.positions[:, 1]), seq.embeddings)
    return out.permute(2, 0, 1)


def concat_for_mae(src: PatchSequence, tgt_unmasked: PatchSequence) -> PatchSequence:
    if len(tgt_unmasked) and src.dim != tgt_unmasked.dim:
        raise GeometryError(f"embedding dims differ: {src.dim} vs {tgt_unmasked.dim}")
    if not len(tgt_unmasked):
        return src
    return PatchSequence(
        torch.cat([src.embeddings, tgt_unmasked.embeddings], dim=0),
        torch.cat([src.positions, tgt_unmasked.positions], dim=0),
        src.domain_tags + tgt_unmasked.domain_tags,
    )


def recovery_geometry(len_concat: int, n_target_patches: int) -> tuple[int, int]:
    """Window size K' and stride S'=1 with floor((len - K')/S') + 1 == n_target."""
    if len_concat < n_target_patches:
        raise GeometryError("source too short for masking ratio")
    return len_concat - n_target_patches + 1, 1


def concat_length(n_source: int, n_target: int, ratio: float) -> int:
    return n_source + n_target - masked_count(ratio, n_target)
