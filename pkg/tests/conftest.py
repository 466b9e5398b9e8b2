import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from ct2xray.dataset import DatasetConfig, build_dataset
from ct2xray.model import ModelConfig
from ct2xray.volumes import PhantomSpec, generate_phantom

settings.register_profile(
    "suite", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")

torch.set_num_threads(1)


def micro_model_config(**overrides):
    """16^3 volumes, 16^2 images, small widths; used for 64-bit grad checks."""
    kw = dict(volume_size=16, image_size=16, content_dim=32, style_dim=16,
              heads=4, ct_channels=(2, 4, 4, 8, 8),
              style_channels=(4, 8, 8, 8, 8, 8),
              content_channels=(4, 8, 8, 8, 8, 8, 8),
              fmap_base=64, fmap_max=16, dis_feature_dim=16, pose_embed=8)
    kw.update(overrides)
    return ModelConfig(**kw)


def smoke_model_config(**overrides):
    """32^3 volumes, 32^2 images; the scale used by smoke training."""
    kw = dict(volume_size=32, image_size=32,
              ct_channels=(4, 8, 12, 16, 16),
              style_channels=(8, 16, 16, 32, 32, 32),
              content_channels=(8, 16, 16, 32, 32, 32, 32),
              fmap_base=256, fmap_max=32)
    kw.update(overrides)
    return ModelConfig(**kw)


def random_batch(cfg, batch=2, dtype=torch.float64, seed=3):
    g = torch.Generator().manual_seed(seed)
    s, r = cfg.volume_size, cfg.image_size
    return {
        "volume": torch.rand(batch, 1, s, s, s, generator=g, dtype=dtype),
        "pose": torch.randn(batch, 25, generator=g, dtype=dtype) * 50,
        "mip": torch.rand(batch, s, s, generator=g, dtype=dtype),
        "drr": torch.rand(batch, r, r, generator=g, dtype=dtype),
        "xray": torch.rand(batch, r, r, generator=g, dtype=dtype),
    }


def tiny_dataset_config(**overrides):
    kw = dict(seed=11, n_train=2, n_val=1, n_style_volumes=2,
              volume_shape=(16, 16, 16), det_px=16, step=0.5,
              n_bone_bodies=3)
    kw.update(overrides)
    return DatasetConfig(**kw)


@pytest.fixture(scope="session")
def phantom32():
    return generate_phantom(PhantomSpec(shape=(32, 32, 32)), seed=7)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data") / "ds"
    return build_dataset(tiny_dataset_config(), out)


@pytest.fixture(scope="session")
def drr_samples(tiny_manifest):
    """Rendered DRR images from the tiny dataset, as numpy arrays."""
    images = []
    for entry in tiny_manifest.train + tiny_manifest.val:
        for drr in entry.drrs:
            import ct2xray.volumes as v
            images.append(v.load_image(tiny_manifest.root / drr["path"]))
    return images
