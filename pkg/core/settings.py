from __future__ import annotations
import copy, hashlib, json, os
from pathlib import Path

import yaml

from core.errors import ConfigError, DatasetError, GeometryError

DEFAULTS = {
    "data": {
        "root": "data",
        "images_per_domain": 4,
        "source_noise": 0.0,
        "signature_seed": None,
        "source": {"height": 64, "width": 64, "class_count": 4, "channel_count": 4,
                   "region_scale": 16.0, "seed": 0},
        "target": {"height": 64, "width": 64, "channel_count": 4, "region_scale": 16.0, "seed": 1},
        "shift": {"gain": 1.3, "offset": 0.1, "noise_sigma": 0.05, "extra_classes": 0, "mix": None},
    },
    "model": {
        "depth": 4,
        "heads": 4,
        "embed_dim": 64,
        "mlp_ratio": 2.0,
        "core_channels": 6,
        "patch_size": 16,
        "upsampler_blocks": 4,
        "encoder_adapters": 1,
        "decoder_adapters": 1,
        "core_checkpoint": None,
    },
    "train": {
        "learning_rate": 1e-4,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.01,
        "steps": 2000,
        "eval_every": 100,
        "mask_ratio": 0.5,
        "lambda_da": 1.0,
        "lambda_mae": 1.0,
        "seg_weight": 1.0,
        "seeds": [0],
        "budget_per_class": 50,
        "grad_accum": 1,
        "val_fraction": 0.1,
    },
    "pretrain": {
        "steps": 300,
        "mask_ratio": 0.75,
        "learning_rate": 1e-3,
        "seed": 0,
    },
    "eval": {
        "mask_ratios": [0.5, 0.75, 1.0],
        "seed": 0,
    },
    "out_dir": "runs",
}

# sections that change what a training run computes
DIGEST_SECTIONS = ("data", "model", "train")

THREADS_ENV = "GEOADAPT_THREADS"


def _merge(defaults: dict, data: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for k, v in data.items():
        key = f"{prefix}{k}"
        if k not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(defaults[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(defaults[k], v, prefix=f"{key}.")
        else:
            out[k] = v
    return out


def load_settings(path: str | os.PathLike | None = None) -> dict:
    """Resolved run config: DEFAULTS overlaid with the JSON or YAML file at ``path``."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f) if str(path).endswith(".json") else yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except (OSError, ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return _merge(DEFAULTS, data)


def apply_overrides(cfg: dict, **flags) -> dict:
    """Command-line flags win over file values; ``None`` means not given."""
    cfg = copy.deepcopy(cfg)
    train_keys = ("lambda_da", "lambda_mae", "mask_ratio", "seeds", "steps", "budget_per_class", "seg_weight")
    for k in train_keys:
        if flags.get(k) is not None:
            cfg["train"][k] = list(flags[k]) if k == "seeds" else flags[k]
    if flags.get("mask_ratios") is not None:
        cfg["eval"]["mask_ratios"] = list(flags["mask_ratios"])
    if flags.get("core_checkpoint") is not None:
        cfg["model"]["core_checkpoint"] = str(flags["core_checkpoint"])
    if flags.get("out_dir") is not None:
        cfg["out_dir"] = str(flags["out_dir"])
    if flags.get("data_root") is not None:
        cfg["data"]["root"] = str(flags["data_root"])
    unknown = set(flags) - set(train_keys) - {"mask_ratios", "core_checkpoint", "out_dir", "data_root"}
    if unknown:
        raise ConfigError(f"unknown override(s): {sorted(unknown)}")
    return cfg


def save_settings(data: dict, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)


def config_digest(cfg: dict) -> str:
    canonical = json.dumps({k: cfg[k] for k in DIGEST_SECTIONS}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


# --- typed views ---------------------------------------------------------------

def scene_specs(cfg: dict):
    """(source SceneSpec, target SceneSpec, DomainShiftSpec) for ``gen-data``."""
    import numpy as np

    from core.synthgeo import DomainShiftSpec, SceneSpec

    data, model = cfg["data"], cfg["model"]
    try:
        src = data["source"]
        tgt = data["target"]
        source = SceneSpec(
            height=int(src["height"]), width=int(src["width"]), class_count=int(src["class_count"]),
            seed=int(src["seed"]), region_scale=float(src["region_scale"]),
            channel_count=int(src["channel_count"]), patch_size=int(model["patch_size"]),
        )
        target = SceneSpec(
            height=int(tgt["height"]), width=int(tgt["width"]), class_count=int(src["class_count"]),
            seed=int(tgt["seed"]), region_scale=float(tgt["region_scale"]),
            channel_count=int(tgt["channel_count"]), patch_size=int(model["patch_size"]),
        )
        sh = data["shift"]
        mix = None if sh["mix"] is None else np.asarray(sh["mix"], dtype=np.float64)
        shift = DomainShiftSpec.uniform(
            target.channel_count, gain=float(sh["gain"]), offset=float(sh["offset"]),
            noise_sigma=float(sh["noise_sigma"]), extra_classes=int(sh["extra_classes"]), mix=mix,
        )
        source.validate()
        target.validate()
    except (TypeError, ValueError, DatasetError) as e:
        raise ConfigError(f"invalid data section: {e}") from e
    return source, target, shift


def model_config(cfg: dict):
    from core.net import AdapterConfig, CoreConfig, ModelConfig

    m = cfg["model"]
    try:
        core = CoreConfig(
            depth=int(m["depth"]), heads=int(m["heads"]), embed_dim=int(m["embed_dim"]),
            mlp_ratio=float(m["mlp_ratio"]), core_channels=int(m["core_channels"]),
            patch_size=int(m["patch_size"]),
        )
        adapters = AdapterConfig(int(m["encoder_adapters"]), int(m["decoder_adapters"]))
        mc = ModelConfig(core=core, adapters=adapters, mask_ratio=float(cfg["train"]["mask_ratio"]),
                         upsampler_blocks=int(m["upsampler_blocks"]))
        mc.validate()
        return mc
    except (TypeError, ValueError, GeometryError) as e:
        raise ConfigError(f"invalid model section: {e}") from e


def train_config(cfg: dict):
    from core.objectives import LossWeights
    from core.trainer import TrainConfig

    t = cfg["train"]
    try:
        weights = LossWeights(float(t["lambda_da"]), float(t["lambda_mae"]), float(t["seg_weight"]))
        tc = TrainConfig(
            learning_rate=float(t["learning_rate"]),
            betas=(float(t["betas"][0]), float(t["betas"][1])),
            eps=float(t["eps"]),
            weight_decay=float(t["weight_decay"]),
            steps=int(t["steps"]),
            eval_every=int(t["eval_every"]),
            mask_ratio=float(t["mask_ratio"]),
            weights=weights,
            seeds=tuple(int(s) for s in t["seeds"]),
            budget_per_class=int(t["budget_per_class"]),
            grad_accum=int(t["grad_accum"]),
            val_fraction=float(t["val_fraction"]),
        )
        tc.validate()
    except (TypeError, ValueError, IndexError) as e:
        raise ConfigError(f"invalid train section: {e}") from e
    return tc


def pretrain_config(cfg: dict):
    from core.trainer import PretrainConfig

    p = cfg["pretrain"]
    try:
        pc = PretrainConfig(
            steps=int(p["steps"]), mask_ratio=float(p["mask_ratio"]),
            learning_rate=float(p["learning_rate"]), seed=int(p["seed"]),
        )
        pc.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid pretrain section: {e}") from e
    return pc


def eval_ratios(cfg: dict) -> list[float]:
    ratios = [float(r) for r in cfg["eval"]["mask_ratios"]]
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"eval mask ratio {r} outside [0, 1]")
    return ratios


def data_root(cfg: dict) -> Path:
    return Path(cfg["data"]["root"])
