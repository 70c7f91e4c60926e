"""Checkpoint archive format.

A checkpoint is a single safetensors file: a JSON text header followed by
named little-endian float32 tensors with declared shapes. The string metadata
block carries the checkpoint header:

- ``format``: always ``diffcap-checkpoint``
- ``version``: format version (``CHECKPOINT_VERSION``)
- ``stage``: ``adapt`` or ``caption``
- ``epoch``, ``seed``: integers as strings
- ``model_config``: the full ``ModelConfig`` as JSON

Tensor names are the ``state_dict`` names of the stage model
(``vision.*``, ``text.*``, ``log_tau`` for adaptation; ``vision.*`` and
``captioner.*`` for captioning). Loading verifies that every tensor the
header's model expects is present exactly once with the right shape.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file
from torch import nn

from diffcap.config import STAGES, ModelConfig
from diffcap.errors import CheckpointError, ConfigError
from diffcap.model import AdaptationModel, CaptioningModel

logger = logging.getLogger(__name__)


CHECKPOINT_FORMAT = "diffcap-checkpoint"
CHECKPOINT_VERSION = "1"


@dataclass(frozen=True, slots=True)
class CheckpointHeader:
    model_config: ModelConfig
    stage: str
    epoch: int
    seed: int

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown checkpoint stage {self.stage!r}")

    def to_metadata(self) -> dict[str, str]:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "epoch": str(self.epoch),
            "seed": str(self.seed),
            "model_config": json.dumps(dataclasses.asdict(self.model_config), sort_keys=True),
        }


@dataclass(frozen=True, slots=True)
class Checkpoint:
    """Header plus named tensors (CPU, float32, contiguous)."""

    header: CheckpointHeader
    tensors: dict[str, torch.Tensor]

    @property
    def stage(self) -> str:
        return self.header.stage


def build_stage_model(model_config: ModelConfig, stage: str) -> nn.Module:
    if stage == "adapt":
        return AdaptationModel(model_config)
    if stage == "caption":
        return CaptioningModel(model_config)
    raise CheckpointError(f"unknown checkpoint stage {stage!r}")


def expected_tensor_shapes(model_config: ModelConfig, stage: str) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every tensor a ``stage`` checkpoint must carry."""

    with torch.device("meta"):
        model = build_stage_model(model_config, stage)
    return {name: tuple(tensor.shape) for name, tensor in model.state_dict().items()}


def checkpoint_from_model(
    model: nn.Module, *, model_config: ModelConfig, stage: str, epoch: int, seed: int
) -> Checkpoint:
    """Snapshot ``model`` parameters into a checkpoint."""

    tensors = {
        name: tensor.detach().to(device="cpu", dtype=torch.float32).contiguous().clone()
        for name, tensor in model.state_dict().items()
    }
    header = CheckpointHeader(model_config=model_config, stage=stage, epoch=epoch, seed=seed)
    return Checkpoint(header=header, tensors=tensors)


def _verify_tensors(
    tensors: Mapping[str, torch.Tensor], expected: Mapping[str, tuple[int, ...]]
) -> None:
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}", tensor_name=name)
        actual = tuple(tensors[name].shape)
        if actual != shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {actual}, expected {shape}", tensor_name=name
            )
    for name in tensors:
        if name not in expected:
            raise CheckpointError(f"checkpoint has unexpected tensor {name!r}", tensor_name=name)


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """Write ``checkpoint`` to ``path`` (a single safetensors file)."""

    expected = expected_tensor_shapes(checkpoint.header.model_config, checkpoint.stage)
    _verify_tensors(checkpoint.tensors, expected)

    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        logger.warning("Overwriting checkpoint %s", path)
    tensors = {name: tensor.contiguous() for name, tensor in sorted(checkpoint.tensors.items())}
    save_file(tensors, str(path), metadata=checkpoint.header.to_metadata())
    logger.info(
        "Saved %s checkpoint (epoch=%s, %s tensors) to %s",
        checkpoint.stage,
        checkpoint.header.epoch,
        len(tensors),
        path,
    )
    return path


def _parse_header(metadata: Mapping[str, str] | None, path: Path) -> CheckpointHeader:
    if not metadata or metadata.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a diffcap checkpoint")
    version = metadata.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version!r} is not supported "
            f"(expected {CHECKPOINT_VERSION!r})"
        )
    try:
        model_config = ModelConfig(**json.loads(metadata["model_config"]))
        return CheckpointHeader(
            model_config=model_config,
            stage=metadata["stage"],
            epoch=int(metadata["epoch"]),
            seed=int(metadata["seed"]),
        )
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header: {exc}") from exc


def load_checkpoint(path: Path) -> Checkpoint:
    """Read and verify a checkpoint.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    CheckpointError
        If the file is corrupt or truncated, has another format version, or
        its tensors do not match the model its header describes (the
        offending tensor is named).
    """

    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")

    try:
        with safe_open(str(path), framework="pt", device="cpu") as handle:
            metadata = handle.metadata()
            tensors = {name: handle.get_tensor(name) for name in handle.keys()}
    except (SafetensorError, OSError, ValueError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint: {exc}") from exc

    header = _parse_header(metadata, path)
    for name, tensor in tensors.items():
        if tensor.dtype != torch.float32:
            raise CheckpointError(
                f"tensor {name!r} has dtype {tensor.dtype}, expected float32", tensor_name=name
            )
    _verify_tensors(tensors, expected_tensor_shapes(header.model_config, header.stage))

    logger.info("Loaded %s checkpoint (epoch=%s) from %s", header.stage, header.epoch, path)
    return Checkpoint(header=header, tensors=tensors)


def restore_model(
    checkpoint: Checkpoint, model: nn.Module, *, prefixes: Iterable[str] = ("",)
) -> list[str]:
    """Copy checkpoint tensors into ``model`` for parameter names under ``prefixes``.

    Every model tensor under a prefix must be present in the checkpoint with
    the same shape; checkpoint tensors outside the prefixes are ignored.

    Returns
    -------
    list[str]
        Names that were restored.
    """

    prefixes = tuple(prefixes)
    state = model.state_dict()
    wanted = [name for name in state if name.startswith(prefixes)]
    for name in wanted:
        if name not in checkpoint.tensors:
            raise CheckpointError(
                f"{checkpoint.stage} checkpoint is missing tensor {name!r}", tensor_name=name
            )
        if tuple(checkpoint.tensors[name].shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(checkpoint.tensors[name].shape)}, "
                f"model expects {tuple(state[name].shape)}",
                tensor_name=name,
            )
    load_pretrained_tensors(model, {name: checkpoint.tensors[name] for name in wanted})
    return wanted


@torch.no_grad()
def load_pretrained_tensors(model: nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    """Copy any subset of named tensors into ``model``.

    This is the hook for externally converted weights: names must match the
    model's ``state_dict`` names and shapes must match exactly.
    """

    state = model.state_dict()
    for name, tensor in tensors.items():
        if name not in state:
            raise CheckpointError(f"model has no tensor named {name!r}", tensor_name=name)
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(tensor.shape)}, "
                f"model expects {tuple(state[name].shape)}",
                tensor_name=name,
            )
        state[name].copy_(tensor)
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("Loaded %s tensors into %s", len(tensors), type(model).__name__)
