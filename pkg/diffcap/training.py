"""Two-stage training: adaptation, then captioning.

Both loops share the same shape:

1. seed every RNG from the stage seed,
2. iterate ``epochs`` passes of ``batch_iter`` (optionally capped at
   ``max_steps`` optimizer steps),
3. Adam with a constant learning rate and global-norm gradient clipping,
4. one ``LossRecord`` per epoch, appended to a line-delimited loss log,
5. a checkpoint of the final state.

A non-finite loss aborts the run with ``NumericalError`` naming the stage,
epoch and step.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from diffcap.checkpoint import Checkpoint, checkpoint_from_model, restore_model
from diffcap.config import ModelConfig, TrainConfig
from diffcap.errors import ConfigError, NumericalError
from diffcap.manifest import CaptionedPair, DatasetManifest, batch_iter, load_sample
from diffcap.metrics import rank_metrics
from diffcap.model import AdaptationModel, CaptioningModel, images_to_tensor, tokens_to_tensor
from diffcap.objectives import XE_REDUCTION, caption_xe_loss, contrastive_loss, similarity_matrix
from diffcap.text import Vocabulary, encode

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class LossRecord:
    """One line of the loss log.

    ``loss`` is the mean training loss over the epoch's steps; ``step`` is the
    cumulative optimizer step count at the end of the epoch.
    """

    stage: str
    epoch: int
    step: int
    loss: float
    components: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "stage": self.stage,
                "epoch": self.epoch,
                "step": self.step,
                "loss": self.loss,
                "components": dict(sorted(self.components.items())),
            }
        )


@dataclass(frozen=True, slots=True)
class TrainResult:
    checkpoint: Checkpoint
    records: tuple[LossRecord, ...]

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def resolve_model_config(model_config: ModelConfig, vocab: Vocabulary) -> ModelConfig:
    """Fill in ``vocab_size`` from ``vocab``, or check that it matches."""

    if model_config.vocab_size == 0:
        return dataclasses.replace(model_config, vocab_size=len(vocab))
    if model_config.vocab_size != len(vocab):
        raise ConfigError(
            f"model.vocab_size ({model_config.vocab_size}) does not match the "
            f"vocabulary ({len(vocab)} ids)"
        )
    return model_config


def collate(
    batch: Sequence[CaptionedPair],
    vocab: Vocabulary,
    max_len: int,
    *,
    device: torch.device | str = "cpu",
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch tensors: ``before``, ``after`` (``(B, 3, H, W)``) and token ids ``(B, L)``."""

    before = images_to_tensor([item.sample.before for item in batch], device=device)
    after = images_to_tensor([item.sample.after for item in batch], device=device)
    ids = tokens_to_tensor([encode(vocab, item.caption, max_len) for item in batch], device=device)
    return before, after, ids


def append_loss_log(records: Iterable[LossRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.to_json() + "\n")


def read_loss_log(path: Path) -> list[LossRecord]:
    if not path.is_file():
        raise FileNotFoundError(f"loss log not found: {path}")
    records: list[LossRecord] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            raw = json.loads(line)
            records.append(
                LossRecord(
                    stage=raw["stage"],
                    epoch=int(raw["epoch"]),
                    step=int(raw["step"]),
                    loss=float(raw["loss"]),
                    components={k: float(v) for k, v in raw["components"].items()},
                )
            )
    return records


def _check_finite(loss: torch.Tensor, *, stage: str, epoch: int, step: int) -> None:
    if not bool(torch.isfinite(loss)):
        raise NumericalError(
            f"non-finite {stage} loss ({float(loss)}) at epoch {epoch}, step {step}"
        )


def _clip_gradients(parameters: Iterable[nn.Parameter], max_norm: float) -> bool:
    total_norm = nn.utils.clip_grad_norm_(list(parameters), max_norm)
    return bool(total_norm > max_norm)


def _progress(iterable: Iterable, *, desc: str, show: bool) -> Iterable:
    return tqdm(iterable, desc=desc, leave=False, disable=not show)


def _log_clipping(stage: str, epoch: int, clipped: int, steps: int) -> None:
    if clipped:
        logger.warning(
            "%s epoch %s: gradient norm clipped on %s of %s steps", stage, epoch, clipped, steps
        )


@torch.no_grad()
def _val_recall_at_1(
    model: AdaptationModel,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    *,
    split: str,
    device: torch.device | str,
) -> float:
    records = manifest.split(split)
    model.eval()
    samples = [load_sample(manifest, record) for record in records]
    before = images_to_tensor([sample.before for sample in samples], device=device)
    after = images_to_tensor([sample.after for sample in samples], device=device)
    ids = tokens_to_tensor(
        [encode(vocab, record.captions[0], model.config.max_len) for record in records],
        device=device,
    )
    similarities = similarity_matrix(model.embed_pairs(before, after), model.embed_texts(ids))
    return rank_metrics(similarities.cpu().double().numpy(), "pair_to_text", (1,)).recall[1]


def train_adapt(
    manifest: DatasetManifest,
    vocab: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    init: Checkpoint | None = None,
    device: torch.device | str = "cpu",
    loss_log_path: Path | None = None,
    val_split: str | None = "val",
    show_progress: bool = False,
) -> TrainResult:
    """Adaptation stage: contrastive image-pair/text retrieval.

    Optimizes the vision encoder, the language encoder and the temperature
    jointly with Adam (``betas=(0.9, beta2)``, ``lr=lr_adapt``). The
    temperature is clamped to ``[0.01, 100]`` after every step.

    Parameters
    ----------
    manifest:
        Dataset; the ``train`` split is optimized.
    vocab:
        Vocabulary for caption encoding.
    model_config, train_config:
        Architecture and stage settings.
    init:
        Optional checkpoint whose ``vision.*``/``text.*``/``log_tau`` tensors
        initialize the model (every tensor present in the model must be in
        the checkpoint).
    device:
        torch device.
    loss_log_path:
        When given, epoch records are appended as JSON lines.
    val_split:
        Split used for end-of-epoch retrieval monitoring (skipped when the
        split is empty or ``None``).
    show_progress:
        Show a tqdm bar per epoch.

    Returns
    -------
    TrainResult
        ``adapt`` checkpoint and the per-epoch loss records.
    """

    if train_config.stage != "adapt":
        raise ConfigError(f"train_adapt needs an adapt-stage config, got {train_config.stage!r}")
    model_config = resolve_model_config(model_config, vocab)

    seed_everything(train_config.seed)
    model = AdaptationModel(model_config).to(device)
    if init is not None:
        prefixes = ("vision.", "text.", "log_tau") if init.stage == "adapt" else ("vision.",)
        restore_model(init, model, prefixes=prefixes)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_config.lr_adapt, betas=(0.9, train_config.beta2)
    )
    monitor_val = bool(val_split) and bool(manifest.split(val_split))

    records: list[LossRecord] = []
    step = 0
    for epoch in range(train_config.epochs):
        model.train()
        totals = {"loss": 0.0, "i2t": 0.0, "t2i": 0.0}
        steps_in_epoch = 0
        clipped = 0
        batches = batch_iter(
            manifest,
            "train",
            train_config.batch_size,
            train_config.seed,
            epoch=epoch,
            drop_last=train_config.drop_last,
        )
        for batch in _progress(batches, desc=f"adapt {epoch}", show=show_progress):
            before, after, ids = collate(batch, vocab, model_config.max_len, device=device)
            pair_embeddings, text_embeddings = model(before, after, ids)
            output = contrastive_loss(pair_embeddings, text_embeddings, model.log_tau)
            _check_finite(output.loss, stage="adapt", epoch=epoch, step=step)

            optimizer.zero_grad(set_to_none=True)
            output.loss.backward()
            clipped += _clip_gradients(model.parameters(), train_config.grad_clip)
            optimizer.step()
            model.clamp_temperature()

            totals["loss"] += float(output.loss)
            totals["i2t"] += float(output.i2t)
            totals["t2i"] += float(output.t2i)
            steps_in_epoch += 1
            step += 1
            if train_config.max_steps and step >= train_config.max_steps:
                break

        if steps_in_epoch == 0:
            raise ConfigError("adapt: no full batch in the train split (check drop_last)")
        _log_clipping("adapt", epoch, clipped, steps_in_epoch)

        components = {
            "i2t": totals["i2t"] / steps_in_epoch,
            "t2i": totals["t2i"] / steps_in_epoch,
            "tau": math.exp(float(model.log_tau)),
            "clipped_steps": float(clipped),
        }
        if monitor_val:
            components["val_r1_pair_to_text"] = _val_recall_at_1(
                model, manifest, vocab, split=val_split, device=device
            )
        record = LossRecord(
            stage="adapt",
            epoch=epoch,
            step=step,
            loss=totals["loss"] / steps_in_epoch,
            components=components,
        )
        records.append(record)
        if loss_log_path is not None:
            append_loss_log([record], loss_log_path)
        logger.info("adapt epoch %s: step=%s loss=%.6f", epoch, step, record.loss)

        if train_config.max_steps and step >= train_config.max_steps:
            break

    checkpoint = checkpoint_from_model(
        model,
        model_config=model_config,
        stage="adapt",
        epoch=records[-1].epoch,
        seed=train_config.seed,
    )
    return TrainResult(checkpoint=checkpoint, records=tuple(records))


@torch.no_grad()
def _val_xe(
    model: CaptioningModel,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    *,
    split: str,
    batch_size: int,
    seed: int,
    device: torch.device | str,
) -> float:
    model.eval()
    total, count = 0.0, 0
    for batch in batch_iter(manifest, split, batch_size, seed, shuffle=False):
        before, after, ids = collate(batch, vocab, model.config.max_len, device=device)
        loss = caption_xe_loss(model(before, after, ids), ids)
        total += float(loss) * len(batch)
        count += len(batch)
    return total / count


def train_caption(
    manifest: DatasetManifest,
    vocab: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    init: Checkpoint | None = None,
    device: torch.device | str = "cpu",
    loss_log_path: Path | None = None,
    val_split: str | None = "val",
    show_progress: bool = False,
) -> TrainResult:
    """Captioning stage: teacher-forced cross-entropy.

    The vision encoder is initialized from ``init`` (adaptation or any other
    checkpoint carrying ``vision.*`` tensors; ``None`` keeps the random
    initialization). The captioner is always trained from scratch. Two Adam
    parameter groups use ``lr_vision`` and ``lr_caption``; with
    ``freeze_vision`` the vision encoder is excluded from optimization and run
    in evaluation mode, so its tensors stay byte-identical.

    Raises
    ------
    CheckpointError
        If ``init`` lacks a vision tensor or has a mismatched shape.
    NumericalError
        On a non-finite loss.
    """

    if train_config.stage != "caption":
        raise ConfigError(
            f"train_caption needs a caption-stage config, got {train_config.stage!r}"
        )
    model_config = resolve_model_config(model_config, vocab)

    seed_everything(train_config.seed)
    model = CaptioningModel(model_config).to(device)
    if init is not None:
        restore_model(init, model, prefixes=("vision.",))

    groups = [{"params": list(model.captioner.parameters()), "lr": train_config.lr_caption}]
    if train_config.freeze_vision:
        model.vision.requires_grad_(False)
    else:
        groups.insert(0, {"params": list(model.vision.parameters()), "lr": train_config.lr_vision})
    optimizer = torch.optim.Adam(groups, betas=(0.9, train_config.beta2))
    trainable = [parameter for group in groups for parameter in group["params"]]
    monitor_val = bool(val_split) and bool(manifest.split(val_split))

    records: list[LossRecord] = []
    step = 0
    for epoch in range(train_config.epochs):
        model.train()
        if train_config.freeze_vision:
            model.vision.eval()
        total = 0.0
        steps_in_epoch = 0
        clipped = 0
        batches = batch_iter(
            manifest,
            "train",
            train_config.batch_size,
            train_config.seed,
            epoch=epoch,
            drop_last=train_config.drop_last,
        )
        for batch in _progress(batches, desc=f"caption {epoch}", show=show_progress):
            before, after, ids = collate(batch, vocab, model_config.max_len, device=device)
            loss = caption_xe_loss(model(before, after, ids), ids)
            _check_finite(loss, stage="caption", epoch=epoch, step=step)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            clipped += _clip_gradients(trainable, train_config.grad_clip)
            optimizer.step()

            total += float(loss)
            steps_in_epoch += 1
            step += 1
            if train_config.max_steps and step >= train_config.max_steps:
                break

        if steps_in_epoch == 0:
            raise ConfigError("caption: no full batch in the train split (check drop_last)")
        _log_clipping("caption", epoch, clipped, steps_in_epoch)

        components = {"clipped_steps": float(clipped)}
        if monitor_val:
            components["val_xe"] = _val_xe(
                model,
                manifest,
                vocab,
                split=val_split,
                batch_size=train_config.batch_size,
                seed=train_config.seed,
                device=device,
            )
        record = LossRecord(
            stage="caption",
            epoch=epoch,
            step=step,
            loss=total / steps_in_epoch,
            components=components,
        )
        records.append(record)
        if loss_log_path is not None:
            append_loss_log([record], loss_log_path)
        logger.info(
            "caption epoch %s: step=%s loss=%.6f (%s)", epoch, step, record.loss, XE_REDUCTION
        )

        if train_config.max_steps and step >= train_config.max_steps:
            break

    checkpoint = checkpoint_from_model(
        model,
        model_config=model_config,
        stage="caption",
        epoch=records[-1].epoch,
        seed=train_config.seed,
    )
    return TrainResult(checkpoint=checkpoint, records=tuple(records))


def load_caption_model(checkpoint: Checkpoint, *, device: torch.device | str = "cpu") -> CaptioningModel:
    """Rebuild a captioning model from a ``caption`` checkpoint, in eval mode."""

    if checkpoint.stage != "caption":
        raise ConfigError(f"expected a caption checkpoint, got {checkpoint.stage!r}")
    model = CaptioningModel(checkpoint.header.model_config)
    restore_model(checkpoint, model)
    return model.to(device).eval()


def load_adaptation_model(
    checkpoint: Checkpoint, *, device: torch.device | str = "cpu"
) -> AdaptationModel:
    """Rebuild an adaptation model from an ``adapt`` checkpoint, in eval mode."""

    if checkpoint.stage != "adapt":
        raise ConfigError(f"expected an adapt checkpoint, got {checkpoint.stage!r}")
    model = AdaptationModel(checkpoint.header.model_config)
    restore_model(checkpoint, model)
    return model.to(device).eval()
