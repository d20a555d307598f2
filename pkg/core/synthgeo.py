"""Synthetic source/target land-cover domains.

Scenes are seeded Voronoi mosaics; pixel spectra are per-class signatures pushed
through a parametric domain shift (gain, offset, channel mixing, Gaussian noise).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from core.errors import AbsentClassWarning, DatasetError
from core.logs import get_logger
from core.tensorstore import IGNORE, DomainDatasetDescriptor, save_descriptor, write_tensor

logger = get_logger(__name__)


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    class_count: int
    seed: int = 0
    region_scale: float = 16.0
    channel_count: int = 4
    patch_size: int = 1

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise DatasetError(f"degenerate scene {self.height}x{self.width}")
        if self.height < self.patch_size or self.width < self.patch_size:
            raise DatasetError(f"scene {self.height}x{self.width} smaller than patch {self.patch_size}")
        if self.class_count < 2:
            raise DatasetError("class_count must be >= 2")
        if self.region_scale <= 0:
            raise DatasetError("region_scale must be positive")


@dataclass(frozen=True)
class DomainShiftSpec:
    channel_gain: np.ndarray
    channel_offset: np.ndarray
    spectral_mix: np.ndarray
    noise_sigma: float = 0.0
    extra_classes: int = 0

    def __post_init__(self):
        c = len(self.channel_gain)
        mix = np.asarray(self.spectral_mix, dtype=np.float64)
        if mix.shape != (c, c) or len(self.channel_offset) != c:
            raise DatasetError(f"shift spec needs gain/offset of length C and a CxC mix (C={c})")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        if self.extra_classes < 0:
            raise DatasetError("extra_classes must be >= 0")

    @property
    def channels(self) -> int:
        return len(self.channel_gain)

    @classmethod
    def identity(cls, channels: int, noise_sigma: float = 0.0, extra_classes: int = 0) -> "DomainShiftSpec":
        return cls(
            channel_gain=np.ones(channels),
            channel_offset=np.zeros(channels),
            spectral_mix=np.eye(channels),
            noise_sigma=noise_sigma,
            extra_classes=extra_classes,
        )

    @classmethod
    def uniform(cls, channels: int, gain: float = 1.0, offset: float = 0.0, noise_sigma: float = 0.0,
                extra_classes: int = 0, mix: np.ndarray | None = None) -> "DomainShiftSpec":
        return cls(
            channel_gain=np.full(channels, float(gain)),
            channel_offset=np.full(channels, float(offset)),
            spectral_mix=np.eye(channels) if mix is None else np.asarray(mix, dtype=np.float64),
            noise_sigma=noise_sigma,
            extra_classes=extra_classes,
        )


def generate_scene(spec: SceneSpec) -> np.ndarray:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    rs = float(spec.region_scale)
    # at most one site per pixel row/column keeps every cell non-empty and the sites distinct
    ny = min(spec.height, max(1, math.ceil(spec.height / rs)))
    nx = min(spec.width, max(1, math.ceil(spec.width / rs)))
    cell_h = spec.height / ny
    cell_w = spec.width / nx
    sites = []
    for i in range(ny):
        for j in range(nx):
            y0, y1 = int(math.floor(i * cell_h)), int(math.floor((i + 1) * cell_h))
            x0, x1 = int(math.floor(j * cell_w)), int(math.floor((j + 1) * cell_w))
            sites.append((rng.integers(y0, max(y1, y0 + 1)), rng.integers(x0, max(x1, x0 + 1))))
    sites = np.asarray(sites, dtype=np.float64)
    n_sites = len(sites)
    if n_sites >= spec.class_count:
        labels = np.concatenate([
            rng.permutation(spec.class_count),
            rng.integers(0, spec.class_count, size=n_sites - spec.class_count),
        ])
        labels = labels[rng.permutation(n_sites)]
    else:
        labels = rng.choice(spec.class_count, size=n_sites, replace=False)
        warnings.warn(
            f"{n_sites} regions cannot hold {spec.class_count} classes", AbsentClassWarning, stacklevel=2
        )
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    coords = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    _, nearest = cKDTree(sites).query(coords)
    return labels[nearest].reshape(spec.height, spec.width).astype(np.int32)


def draw_signatures(class_count: int, channels: int, seed: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=(class_count, channels))


def render_image(mask: np.ndarray, signatures: np.ndarray, shift: DomainShiftSpec, seed: int) -> np.ndarray:
    signatures = np.asarray(signatures, dtype=np.float64)
    present = np.unique(mask[mask != IGNORE])
    if present.size and present.max() >= len(signatures):
        raise DatasetError(f"missing signature for class {int(present.max())}")
    if signatures.shape[1] != shift.channels:
        raise DatasetError(f"signatures have {signatures.shape[1]} channels, shift expects {shift.channels}")
    shifted = np.asarray(shift.spectral_mix, dtype=np.float64) @ (
        shift.channel_gain[:, None] * signatures.T + shift.channel_offset[:, None]
    )
    safe = np.where(mask == IGNORE, 0, mask)
    img = shifted[:, safe]
    if shift.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(0.0, shift.noise_sigma, size=img.shape)
    return img.astype(np.float32)


def sample_labeled_pixels(masks: list[np.ndarray], class_count: int, budget_per_class: int, seed: int,
                          exclude: list[np.ndarray] | None = None) -> list[tuple[int, int, int]]:
    """Uniform per-class sampling without replacement over all images.

    Returns sorted (image index, flat pixel index, class id) triples; a class with
    fewer than ``budget_per_class`` pixels contributes all of them.
    """
    if budget_per_class < 0:
        raise DatasetError("budget_per_class must be >= 0")
    if budget_per_class == 0:
        return []
    rng = np.random.default_rng(seed)
    pools: list[list[np.ndarray]] = [[] for _ in range(class_count)]
    for i, m in enumerate(masks):
        flat = m.ravel()
        keep = flat != IGNORE
        if exclude is not None:
            keep &= ~exclude[i].ravel()
        idx = np.nonzero(keep)[0]
        for c in range(class_count):
            sel = idx[flat[idx] == c]
            if sel.size:
                pools[c].append(np.stack([np.full(sel.size, i), sel], axis=1))
    picked: list[tuple[int, int, int]] = []
    for c in range(class_count):
        if not pools[c]:
            continue
        pool = np.concatenate(pools[c], axis=0)
        n = min(budget_per_class, len(pool))
        rows = pool[np.sort(rng.choice(len(pool), size=n, replace=False))]
        picked.extend((int(i), int(p), c) for i, p in rows)
    return sorted(picked)


@dataclass
class DomainPair:
    source: DomainDatasetDescriptor
    target: DomainDatasetDescriptor
    signatures: np.ndarray = field(repr=False, default=None)


def _write_domain(root: Path, name: str, scene: SceneSpec, n_images: int, signatures: np.ndarray,
                  shift: DomainShiftSpec) -> tuple[DomainDatasetDescriptor, list[np.ndarray]]:
    directory = root / name
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    images, masks, shapes, arrays = [], [], [], []
    for k in range(n_images):
        spec_k = replace(scene, seed=scene.seed * 1000 + k)
        mask = generate_scene(spec_k)
        img = render_image(mask, signatures, shift, seed=spec_k.seed + 7919)
        rel_img, rel_mask = f"images/{k:04d}.gt", f"masks/{k:04d}.gt"
        write_tensor(img, directory / rel_img)
        write_tensor(mask, directory / rel_mask)
        images.append(rel_img)
        masks.append(rel_mask)
        shapes.append((scene.height, scene.width))
        arrays.append(mask)
    desc = DomainDatasetDescriptor(
        domain=name,
        class_count=scene.class_count,
        channel_count=scene.channel_count,
        image_paths=images,
        mask_paths=masks,
        shapes=shapes,
        root=directory,
    )
    return desc, arrays


def make_domain_pair(
    root: str | Path,
    source_spec: SceneSpec,
    target_spec: SceneSpec,
    shift: DomainShiftSpec,
    budget_per_class: int,
    images_per_domain: int = 4,
    source_noise: float = 0.0,
    signature_seed: int | None = None,
) -> DomainPair:
    """Write ``root/source`` and ``root/target`` and return their descriptors.

    The target carries ``source classes + shift.extra_classes`` classes. Signatures
    are drawn once over max(C_S, C_T) bands; each domain reads its first C bands.
    """
    if budget_per_class < 0:
        raise DatasetError("budget_per_class must be >= 0")
    if shift.channels != target_spec.channel_count:
        raise DatasetError(
            f"shift has {shift.channels} channels, target scene has {target_spec.channel_count}"
        )
    root = Path(root)
    target_spec = replace(target_spec, class_count=source_spec.class_count + shift.extra_classes)
    bands = max(source_spec.channel_count, target_spec.channel_count)
    seed = source_spec.seed if signature_seed is None else signature_seed
    signatures = draw_signatures(target_spec.class_count, bands, seed)

    src_shift = DomainShiftSpec.identity(source_spec.channel_count, noise_sigma=source_noise)
    source, _ = _write_domain(root, "source", source_spec, images_per_domain,
                              signatures[: source_spec.class_count, : source_spec.channel_count], src_shift)
    target, tmasks = _write_domain(root, "target", target_spec, images_per_domain,
                                   signatures[:, : target_spec.channel_count], shift)

    if budget_per_class > 0:
        present = set(np.unique(np.concatenate([m.ravel() for m in tmasks])).tolist())
        absent = [c for c in range(target.class_count) if c not in present]
        if absent:
            raise DatasetError(f"budget requested for classes absent from the target: {absent}")
    target.labeled_budget = sample_labeled_pixels(tmasks, target.class_count, budget_per_class, target_spec.seed)
    save_descriptor(source, root / "source")
    save_descriptor(target, root / "target")
    logger.info(
        "domain pair written to %s: source %d classes/%d bands, target %d classes/%d bands, %d budget pixels",
        root, source.class_count, source.channel_count, target.class_count, target.channel_count,
        len(target.labeled_budget),
    )
    return DomainPair(source=source, target=target, signatures=signatures)
