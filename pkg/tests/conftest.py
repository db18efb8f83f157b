"""
Shared fixtures: one small phantom per test session plus its split.
"""

import sys
from pathlib import Path

import pytest

# Add project root to path
sys.path.append(str(Path(__file__).parent.parent))

from config.settings import settings
from data.phantom import PhantomConfig, generate_phantom_dataset
from data.splitting import save_split, stratified_disc_split

# tests never write the rotating log file
settings.log_file = None

PHANTOM_PATIENTS = 6
PHANTOM_SIZE = 128
PHANTOM_SLICES = 5


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    config = PhantomConfig(
        n_patients=PHANTOM_PATIENTS,
        image_size=PHANTOM_SIZE,
        slices_per_series=PHANTOM_SLICES,
        seed=3,
    )
    generate_phantom_dataset(config, out)
    return out


@pytest.fixture(scope="session")
def manifest_path(phantom_dir):
    return phantom_dir / "manifest.csv"


@pytest.fixture(scope="session")
def manifest(phantom_dir):
    from data.manifest import load_manifest

    return load_manifest(phantom_dir / "manifest.csv")


@pytest.fixture(scope="session")
def split(manifest):
    # a balanced three-way split keeps every partition non-empty on 30 discs
    return stratified_disc_split(manifest, (0.6, 0.2, 0.2), seed=11)


@pytest.fixture(scope="session")
def split_path(split, tmp_path_factory):
    return save_split(split, tmp_path_factory.mktemp("split") / "split.csv")


def tiny_config(stage, **overrides):
    """Tiny-preset stage config shortened to a couple of epochs"""
    from config.run_config import RunConfig

    values = {"epochs": 2, "batch_size": 8, "seed": 5}
    values.update(overrides)
    return RunConfig.for_stage(stage, "tiny", **values)


@pytest.fixture(scope="session")
def pretrain_result(manifest, split, tmp_path_factory):
    from training.trainer import pretrain_contrastive

    out_dir = tmp_path_factory.mktemp("pretrain")
    return pretrain_contrastive(tiny_config("pretrain"), manifest, split, out_dir)


@pytest.fixture(scope="session")
def finetune_result(manifest, split, pretrain_result, tmp_path_factory):
    from training.trainer import finetune_classifier

    return finetune_classifier(
        tiny_config("finetune"),
        manifest,
        split,
        pretrain_result.best_checkpoint,
        tmp_path_factory.mktemp("finetune"),
    )
