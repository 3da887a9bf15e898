"""Shared fixtures: small datasets, tiny model configs and an isolated ENERF_HOME."""

import numpy as np
import pytest

from enerf import config as config_module
from enerf.config import RunConfig, Variant
from enerf.diffcore import ParamStore
from enerf.field import RadianceField
from enerf.scenegen import generate_dataset, preset_scene


@pytest.fixture(autouse=True)
def isolated_home(tmp_path, monkeypatch):
    """Keep logs and decoder caches out of the real home directory."""
    cfg = config_module.config
    home = tmp_path / "enerf-home"
    monkeypatch.setattr(cfg, "data_dir", home)
    monkeypatch.setattr(cfg, "log_file", home / "enerf.log")
    monkeypatch.setattr(cfg, "decoders_dir", home / "decoders")
    monkeypatch.setattr(cfg, "progress", False)
    return home


def tiny_run_config(variant: str = "enhance", **sections) -> RunConfig:
    """A model small enough to train a few steps in well under a second."""
    base = RunConfig().with_overrides(
        {
            "scene": {"views": 4, "eval_views": 1, "width": 8, "height": 8, "quadrature": 64},
            "sampling": {
                "n_uniform": 4,
                "n_log": 4,
                "proposal_samples": [6],
                "nerf_samples": 6,
                "proposal_table_log2": 6,
                "proposal_resolution": 8,
                "proposal_hidden": 8,
            },
            "field": {
                "variant": variant,
                "spatial_hidden": 16,
                "directional_hidden": 16,
                "appearance_dim": 4,
                "geo_features": 4,
                "table_log2": 8,
                "grid_resolution": 16,
                "decoder_hidden": 8,
                "decoder_features": 8,
                "decoder_pretrain_steps": 0,
            },
            "train": {
                "iterations": 3,
                "rays_per_batch": 16,
                "log_every": 1,
                "checkpoint_every": 0,
                "warmup_steps": 2,
                "chunk": 64,
            },
        }
    )
    return base.with_overrides(sections) if sections else base


@pytest.fixture
def run_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    """Four 8x8 training views and one eval view of the Lambertian scene."""
    return generate_dataset(
        preset_scene("lambertian"), n_train=4, n_eval=1, resolution=(8, 8), seed=0, n_quadrature=64
    )


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_dataset):
    from enerf.scenegen import save_dataset

    return save_dataset(tiny_dataset, tmp_path_factory.mktemp("data") / "lambertian")


@pytest.fixture
def field64():
    """Factory for float64 fields, for finite-difference checks."""

    def build(variant: str = Variant.ENHANCE.value, n_images: int = 3) -> RadianceField:
        cfg = tiny_run_config(variant).field
        return RadianceField(ParamStore(dtype=np.float64), cfg, n_images)

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
