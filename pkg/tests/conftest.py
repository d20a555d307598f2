import pytest

from core.net import AdapterConfig, CoreConfig, ModelConfig
from core.synthgeo import DomainShiftSpec, SceneSpec, make_domain_pair

TINY_CORE = CoreConfig(depth=1, heads=2, embed_dim=16, mlp_ratio=2.0, core_channels=3, patch_size=8)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(core=TINY_CORE, adapters=AdapterConfig(1, 1), mask_ratio=0.5, upsampler_blocks=3)


@pytest.fixture(scope="session")
def tiny_pair(tmp_path_factory):
    """Two 32x32 images per domain, 3 classes, 4 source bands and 5 target bands."""
    root = tmp_path_factory.mktemp("pair")
    src = SceneSpec(32, 32, 3, seed=0, region_scale=12.0, channel_count=4, patch_size=8)
    tgt = SceneSpec(32, 32, 3, seed=1, region_scale=12.0, channel_count=5, patch_size=8)
    shift = DomainShiftSpec.uniform(5, gain=1.3, offset=0.1, noise_sigma=0.05)
    return make_domain_pair(root, src, tgt, shift, budget_per_class=5, images_per_domain=2)


@pytest.fixture
def tiny_config(tmp_path):
    """Resolved-config overrides for CLI runs on a tiny pair."""
    return {
        "data": {
            "root": str(tmp_path / "data"),
            "images_per_domain": 2,
            "source": {"height": 32, "width": 32, "class_count": 3, "channel_count": 4,
                       "region_scale": 12.0, "seed": 0},
            "target": {"height": 32, "width": 32, "channel_count": 5, "region_scale": 12.0, "seed": 1},
        },
        "model": {"depth": 1, "heads": 2, "embed_dim": 16, "core_channels": 3, "patch_size": 8,
                  "upsampler_blocks": 3},
        "train": {"steps": 2, "eval_every": 1, "budget_per_class": 3},
        "pretrain": {"steps": 2},
        "out_dir": str(tmp_path / "runs"),
    }
