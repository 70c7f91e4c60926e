"""Model-driven evaluation and report emission.

``eval_retrieval`` embeds a split with an adaptation checkpoint and reports
rank metrics in both directions. ``eval_captioning`` greedy-decodes a split
with a captioning checkpoint and reports BLEU-4, ROUGE-L and CIDEr-D overall,
CIDEr-D per change type, and how often the generated caption names the right
change type.

Reports are JSON documents with sorted keys.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from diffcap.checkpoint import Checkpoint
from diffcap.config import EvalConfig
from diffcap.errors import DataError
from diffcap.generator import infer_change_type
from diffcap.manifest import CHANGE_TYPES, DatasetManifest, PairRecord, load_sample
from diffcap.metrics import DIRECTIONS, TIE_RULE, bleu, cider_d_scores, rank_metrics, rouge_l
from diffcap.model import CaptioningModel, images_to_tensor, tokens_to_tensor
from diffcap.objectives import XE_REDUCTION, similarity_matrix
from diffcap.text import Vocabulary, decode, encode
from diffcap.training import load_adaptation_model, load_caption_model

logger = logging.getLogger(__name__)


EVAL_CHUNK_SIZE = 64


@dataclass(frozen=True, slots=True)
class MetricReport:
    """Evaluation summary of one split.

    ``retrieval`` maps a direction to ``{"R@K": ..., "MdR": ..., "MnR": ...}``.
    ``captioning`` holds the overall scores, ``per_change_type`` CIDEr-D and
    ``change_type_accuracy``.
    """

    split: str
    count: int
    config_digest: str
    retrieval: dict[str, dict[str, float]] | None = None
    captioning: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "count": self.count,
            "config_digest": self.config_digest,
            "tie_rule": TIE_RULE,
            "xe_reduction": XE_REDUCTION,
            "retrieval": self.retrieval,
            "captioning": self.captioning,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def write_report(report: MetricReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    logger.info("Wrote metric report (%s, %s items) to %s", report.split, report.count, path)
    return path


@dataclass(frozen=True, slots=True)
class Prediction:
    """One decoded caption with its references and per-item CIDEr-D."""

    id: str
    caption: str
    references: tuple[str, ...]
    change_type: str
    cider_d: float = 0.0
    inferred_change_type: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "caption": self.caption,
                "references": list(self.references),
                "change_type": self.change_type,
                "inferred_change_type": self.inferred_change_type,
                "cider_d": self.cider_d,
            }
        )


def write_predictions(predictions: Sequence[Prediction], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "".join(prediction.to_json() + "\n" for prediction in predictions), encoding="utf-8"
    )
    return path


@dataclass(frozen=True, slots=True)
class CaptionEvaluation:
    report: MetricReport
    predictions: tuple[Prediction, ...] = field(default_factory=tuple)


def _split_records(manifest: DatasetManifest, split: str) -> tuple[PairRecord, ...]:
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    return records


def _chunks(records: Sequence[PairRecord], size: int) -> list[Sequence[PairRecord]]:
    return [records[start : start + size] for start in range(0, len(records), size)]


def _pair_tensors(
    manifest: DatasetManifest, records: Sequence[PairRecord], device: torch.device | str
) -> tuple[torch.Tensor, torch.Tensor]:
    samples = [load_sample(manifest, record) for record in records]
    before = images_to_tensor([sample.before for sample in samples], device=device)
    after = images_to_tensor([sample.after for sample in samples], device=device)
    return before, after


@torch.no_grad()
def retrieval_similarities(
    checkpoint: Checkpoint,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    split: str,
    *,
    device: torch.device | str = "cpu",
) -> np.ndarray:
    """``B x B`` cosine similarities; text ``j`` is record ``j``'s first caption."""

    model = load_adaptation_model(checkpoint, device=device)
    records = _split_records(manifest, split)

    pair_embeddings, text_embeddings = [], []
    for chunk in _chunks(records, EVAL_CHUNK_SIZE):
        before, after = _pair_tensors(manifest, chunk, device)
        ids = tokens_to_tensor(
            [encode(vocab, record.captions[0], model.config.max_len) for record in chunk],
            device=device,
        )
        pair_embeddings.append(model.embed_pairs(before, after))
        text_embeddings.append(model.embed_texts(ids))

    similarities = similarity_matrix(torch.cat(pair_embeddings), torch.cat(text_embeddings))
    return similarities.cpu().double().numpy()


def eval_retrieval(
    checkpoint: Checkpoint,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    split: str = "test",
    *,
    ks: Sequence[int] = (1, 5, 10),
    config_digest: str = "",
    device: torch.device | str = "cpu",
) -> MetricReport:
    """Image-pair/text retrieval over a whole split, both directions.

    Raises
    ------
    ConfigError
        If ``checkpoint`` is not from the adaptation stage.
    DataError
        If the split is empty.
    """

    similarities = retrieval_similarities(checkpoint, manifest, vocab, split, device=device)
    retrieval = {
        direction: rank_metrics(similarities, direction, ks).to_dict() for direction in DIRECTIONS
    }
    logger.info(
        "Retrieval on %s (%s pairs): pair->text R@1=%.2f, text->pair R@1=%.2f",
        split,
        len(similarities),
        retrieval["pair_to_text"].get("R@1", float("nan")),
        retrieval["text_to_pair"].get("R@1", float("nan")),
    )
    return MetricReport(
        split=split, count=len(similarities), config_digest=config_digest, retrieval=retrieval
    )


@torch.no_grad()
def decode_captions(
    model: CaptioningModel,
    vocab: Vocabulary,
    before: torch.Tensor,
    after: torch.Tensor,
    max_steps: int,
) -> list[str]:
    """Greedy-decode a batch of pairs to caption strings."""

    sequences = model.generate(before, after, max_steps)
    return [decode(vocab, sequence.ids) for sequence in sequences]


def change_type_accuracy(predictions: Sequence[Prediction]) -> dict[str, float]:
    """Fraction of captions whose inferred change type matches the label.

    Keys are ``"overall"`` plus every change type present.
    """

    hits: dict[str, list[bool]] = defaultdict(list)
    for prediction in predictions:
        correct = prediction.inferred_change_type == prediction.change_type
        hits["overall"].append(correct)
        hits[prediction.change_type].append(correct)
    return {key: float(np.mean(values)) for key, values in sorted(hits.items())}


def score_predictions(
    predictions: Sequence[Prediction], eval_config: EvalConfig
) -> tuple[dict[str, Any], tuple[Prediction, ...]]:
    """Corpus metrics plus per-type CIDEr-D; returns predictions with CIDEr-D filled in.

    Per-type CIDEr-D is the mean of per-item scores computed with corpus-wide
    document frequencies, grouped by label afterwards.
    """

    for prediction in predictions:
        if prediction.change_type not in CHANGE_TYPES:
            raise DataError(
                f"item {prediction.id!r}: unknown change_type {prediction.change_type!r}"
            )

    candidates = [prediction.caption for prediction in predictions]
    references = [list(prediction.references) for prediction in predictions]
    per_item = cider_d_scores(
        candidates, references, max_n=eval_config.cider_max_n, sigma=eval_config.cider_sigma
    )
    scored = tuple(
        Prediction(
            id=prediction.id,
            caption=prediction.caption,
            references=prediction.references,
            change_type=prediction.change_type,
            cider_d=float(score),
            inferred_change_type=infer_change_type(prediction.caption),
        )
        for prediction, score in zip(predictions, per_item)
    )

    grouped: dict[str, list[float]] = defaultdict(list)
    for prediction in scored:
        grouped[prediction.change_type].append(prediction.cider_d)
    per_change_type = {
        change_type: {"CIDEr-D": float(np.mean(scores)), "count": len(scores)}
        for change_type, scores in sorted(grouped.items())
    }

    captioning = {
        f"BLEU-{eval_config.bleu_max_n}": bleu(candidates, references, eval_config.bleu_max_n),
        "ROUGE-L": rouge_l(candidates, references, eval_config.rouge_beta2),
        "CIDEr-D": float(np.mean(per_item)),
        "METEOR": None,
        "per_change_type": per_change_type,
        "change_type_accuracy": change_type_accuracy(scored),
    }
    return captioning, scored


def eval_captioning(
    checkpoint: Checkpoint,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    split: str = "test",
    *,
    eval_config: EvalConfig | None = None,
    max_steps: int | None = None,
    config_digest: str = "",
    device: torch.device | str = "cpu",
) -> CaptionEvaluation:
    """Greedy-decode every pair of ``split`` and score against all references.

    Parameters
    ----------
    max_steps:
        Decoding cap; defaults to ``max_len - 2`` of the checkpoint's model.

    Raises
    ------
    DataError
        If the split is empty or holds an unknown change type.
    """

    eval_config = eval_config or EvalConfig()
    model = load_caption_model(checkpoint, device=device)
    steps = max_steps or model.config.max_len - 2
    records = _split_records(manifest, split)

    predictions: list[Prediction] = []
    for chunk in _chunks(records, EVAL_CHUNK_SIZE):
        before, after = _pair_tensors(manifest, chunk, device)
        captions = decode_captions(model, vocab, before, after, steps)
        predictions.extend(
            Prediction(
                id=record.id,
                caption=caption,
                references=record.captions,
                change_type=record.change_type,
            )
            for record, caption in zip(chunk, captions)
        )
    predictions.sort(key=lambda prediction: prediction.id)

    captioning, scored = score_predictions(predictions, eval_config)
    logger.info(
        "Captioning on %s (%s pairs): CIDEr-D=%.4f ROUGE-L=%.4f",
        split,
        len(scored),
        captioning["CIDEr-D"],
        captioning["ROUGE-L"],
    )
    report = MetricReport(
        split=split, count=len(scored), config_digest=config_digest, captioning=captioning
    )
    return CaptionEvaluation(report=report, predictions=scored)


def changed_patch_mass(heatmap: np.ndarray, changed: np.ndarray) -> tuple[float, float]:
    """Share of heatmap mass on changed patches, and the uniform baseline.

    Parameters
    ----------
    heatmap:
        ``grid x grid`` non-negative attention map.
    changed:
        Flat boolean mask over the ``grid * grid`` patches (row-major).

    Returns
    -------
    tuple[float, float]
        ``(mass, baseline)`` where ``baseline = changed.sum() / n``.
    """

    weights = np.asarray(heatmap, dtype=np.float64).reshape(-1)
    mask = np.asarray(changed, dtype=bool).reshape(-1)
    if weights.shape != mask.shape:
        raise ValueError(f"heatmap has {weights.size} patches, mask has {mask.size}")
    total = weights.sum()
    if total <= 0:
        raise ValueError("heatmap has no mass")
    return float(weights[mask].sum() / total), float(mask.mean())
