"""Pytest configuration.

The package is not installed for tests; project modules are imported by adding
the repository root to `sys.path`.

Shared fixtures build a tiny model config and a tiny Mini-Change dataset
(16x16 images, 2x2 patches of 8 pixels) so training tests run in seconds.
"""

from __future__ import annotations

import sys
from pathlib import Path

import pytest


REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT))

from diffcap.config import ModelConfig, TrainConfig  # noqa: E402
from diffcap.generator import generate_minichange  # noqa: E402
from diffcap.manifest import DatasetManifest  # noqa: E402
from diffcap.text import Vocabulary, build_vocab  # noqa: E402


TINY_IMAGE_SIZE = 16
TINY_PATCH_SIZE = 8


@pytest.fixture(autouse=True)
def _no_dotenv(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("DIFFCAP_DISABLE_DOTENV", "1")


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        image_size=TINY_IMAGE_SIZE,
        patch_size=TINY_PATCH_SIZE,
        d_image=8,
        d_text=8,
        heads=2,
        n_intra=1,
        n_inter=1,
        n_text_layers=1,
        n_caption_encoder=1,
        n_caption_decoder=1,
        dropout=0.0,
        max_len=12,
    )


@pytest.fixture
def tiny_adapt_config() -> TrainConfig:
    return TrainConfig(stage="adapt", epochs=2, batch_size=4, lr_adapt=1e-3, beta2=0.98, seed=7)


@pytest.fixture
def tiny_caption_config() -> TrainConfig:
    return TrainConfig(stage="caption", epochs=2, batch_size=4, lr_vision=1e-3, lr_caption=1e-3, seed=7)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out_dir = tmp_path_factory.mktemp("minichange")
    generate_minichange(
        7,
        12,
        TINY_IMAGE_SIZE,
        out_dir,
        patch_size=TINY_PATCH_SIZE,
        n_val=6,
        n_test=6,
    )
    return out_dir


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset_dir: Path) -> DatasetManifest:
    from diffcap.manifest import load_manifest

    return load_manifest(tiny_dataset_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def tiny_vocab(tiny_manifest: DatasetManifest) -> Vocabulary:
    return build_vocab(tiny_manifest)
