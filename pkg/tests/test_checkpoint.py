from __future__ import annotations

import dataclasses
from pathlib import Path

import pytest
import torch
from safetensors import safe_open
from safetensors.torch import save_file

from diffcap.checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    expected_tensor_shapes,
    load_checkpoint,
    load_pretrained_tensors,
    restore_model,
    save_checkpoint,
)
from diffcap.config import ModelConfig
from diffcap.errors import CheckpointError
from diffcap.model import AdaptationModel, CaptioningModel


@pytest.fixture
def adapt_checkpoint(tiny_model_config: ModelConfig) -> Checkpoint:
    config = dataclasses.replace(tiny_model_config, vocab_size=10)
    torch.manual_seed(3)
    model = AdaptationModel(config)
    return checkpoint_from_model(model, model_config=config, stage="adapt", epoch=2, seed=3)


def _raw(path: Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    with safe_open(str(path), framework="pt", device="cpu") as handle:
        return {name: handle.get_tensor(name) for name in handle.keys()}, handle.metadata()


def test_save_and_load_is_bit_exact(tmp_path: Path, adapt_checkpoint: Checkpoint) -> None:
    path = save_checkpoint(adapt_checkpoint, tmp_path / "adapt.safetensors")

    loaded = load_checkpoint(path)

    assert loaded.header == adapt_checkpoint.header
    assert loaded.tensors.keys() == adapt_checkpoint.tensors.keys()
    for name, tensor in adapt_checkpoint.tensors.items():
        assert torch.equal(loaded.tensors[name], tensor), name


def test_adapt_checkpoint_carries_every_stage_tensor(adapt_checkpoint: Checkpoint) -> None:
    names = set(adapt_checkpoint.tensors)

    assert "log_tau" in names
    assert any(name.startswith("text.") for name in names)
    assert names == set(expected_tensor_shapes(adapt_checkpoint.header.model_config, "adapt"))


def test_caption_checkpoint_has_no_text_tensors(tiny_model_config: ModelConfig) -> None:
    config = dataclasses.replace(tiny_model_config, vocab_size=10)

    names = expected_tensor_shapes(config, "caption")

    assert not any(name.startswith("text.") for name in names)
    assert any(name.startswith("captioner.") for name in names)


def test_load_rejects_truncated_file(tmp_path: Path, adapt_checkpoint: Checkpoint) -> None:
    path = save_checkpoint(adapt_checkpoint, tmp_path / "adapt.safetensors")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])

    with pytest.raises(CheckpointError, match="corrupt or truncated"):
        load_checkpoint(path)


def test_load_names_renamed_tensor(tmp_path: Path, adapt_checkpoint: Checkpoint) -> None:
    path = save_checkpoint(adapt_checkpoint, tmp_path / "adapt.safetensors")
    tensors, metadata = _raw(path)
    tensors["log_temperature"] = tensors.pop("log_tau")
    save_file(tensors, str(path), metadata=metadata)

    with pytest.raises(CheckpointError, match="log_tau") as excinfo:
        load_checkpoint(path)

    assert excinfo.value.tensor_name == "log_tau"


def test_load_rejects_other_version(tmp_path: Path, adapt_checkpoint: Checkpoint) -> None:
    path = save_checkpoint(adapt_checkpoint, tmp_path / "adapt.safetensors")
    tensors, metadata = _raw(path)
    save_file(tensors, str(path), metadata={**metadata, "version": "99"})

    with pytest.raises(CheckpointError, match="not supported"):
        load_checkpoint(path)


def test_load_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.safetensors")


def test_restore_vision_from_adapt_into_caption_model(
    tiny_model_config: ModelConfig, adapt_checkpoint: Checkpoint
) -> None:
    model = CaptioningModel(adapt_checkpoint.header.model_config)

    restored = restore_model(adapt_checkpoint, model, prefixes=("vision.",))

    assert restored and all(name.startswith("vision.") for name in restored)
    torch.testing.assert_close(
        model.vision.proj.detach(), adapt_checkpoint.tensors["vision.proj"], rtol=0, atol=0
    )


def test_restore_rejects_shape_mismatch(
    tiny_model_config: ModelConfig, adapt_checkpoint: Checkpoint
) -> None:
    other = dataclasses.replace(tiny_model_config, vocab_size=10, d_text=4)
    model = CaptioningModel(other)

    with pytest.raises(CheckpointError, match="vision.proj"):
        restore_model(adapt_checkpoint, model, prefixes=("vision.",))


def test_load_pretrained_tensors_copies_a_subset(tiny_model_config: ModelConfig) -> None:
    config = dataclasses.replace(tiny_model_config, vocab_size=10)
    model = AdaptationModel(config)
    class_embedding = torch.full((config.d_image,), 0.5)

    load_pretrained_tensors(model, {"vision.class_embedding": class_embedding})

    torch.testing.assert_close(model.vision.class_embedding.detach(), class_embedding)
    with pytest.raises(CheckpointError, match="no tensor named"):
        load_pretrained_tensors(model, {"vision.unknown": class_embedding})
