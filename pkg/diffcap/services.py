"""Application service layer.

This module wires the pure pipeline (generation, training, evaluation) to
artifacts on disk: checkpoints, loss logs, reports, charts and the DuckDB run
store. It exists so the CLI stays a thin argument parser while every command's
behavior is testable with pytest.

Artifact layout under an output directory::

    resolved_config.json   every command
    manifest.jsonl images/ gen-data
    vocab.txt              build-vocab
    adapt.safetensors      adapt
    caption.safetensors    caption-train
    loss_log.jsonl         adapt, caption-train (one stage's records replaced per run)
    loss_curve.html        adapt, caption-train
    runs.duckdb            adapt, caption-train, sweep-layers, ablate-adapt (read by runs)
    retrieval_report.json  eval-retrieval
    caption_report.json    eval-caption
    predictions.jsonl      eval-caption
    attention.json/.html   export-attention
    sweep.json             sweep-layers
    ablation.json          ablate-adapt
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from diffcap.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from diffcap.config import RunConfig, config_digest, write_resolved_config
from diffcap.errors import ConfigError, DataError
from diffcap.evaluation import (
    CaptionEvaluation,
    MetricReport,
    decode_captions,
    eval_captioning,
    eval_retrieval,
    changed_patch_mass,
    write_predictions,
    write_report,
)
from diffcap.generator import difference_mask, generate_minichange, patch_change_mask
from diffcap.manifest import DatasetManifest, load_image, load_manifest
from diffcap.model import attention_heatmaps, export_attention, images_to_tensor
from diffcap.run_store import (
    ABLATION_TABLE,
    LOSS_TABLE,
    SWEEP_TABLE,
    TABLES,
    AblationRow,
    SweepRow,
    append_ablation_rows,
    append_loss_records,
    append_sweep_rows,
    export_table_csv,
    fetch_ablation_rows,
    fetch_loss_records,
    fetch_sweep_rows,
    reset_run_store,
)
from diffcap.text import Vocabulary, build_vocab, load_vocab, save_vocab
from diffcap.training import (
    LossRecord,
    TrainResult,
    load_adaptation_model,
    load_caption_model,
    read_loss_log,
    resolve_model_config,
    train_adapt,
    train_caption,
)
from diffcap.viz import (
    build_attention_heatmap_chart,
    build_heatmap_rows,
    build_loss_chart_rows,
    build_loss_curve_chart,
    save_chart,
)

logger = logging.getLogger(__name__)


MANIFEST_NAME = "manifest.jsonl"
VOCAB_NAME = "vocab.txt"
ADAPT_CHECKPOINT_NAME = "adapt.safetensors"
CAPTION_CHECKPOINT_NAME = "caption.safetensors"
LOSS_LOG_NAME = "loss_log.jsonl"
RUN_STORE_NAME = "runs.duckdb"


def run_id_for(out_dir: Path, run_config: RunConfig) -> str:
    """Deterministic run id: output directory name plus a config digest prefix."""

    return f"{out_dir.resolve().name}-{config_digest(run_config)[:12]}"


def generate_dataset(run_config: RunConfig, out_dir: Path) -> DatasetManifest:
    """``gen-data``: write Mini-Change images and manifest."""

    data = run_config.data
    manifest = generate_minichange(
        data.seed,
        data.n_pairs,
        run_config.model.image_size,
        out_dir,
        patch_size=run_config.model.patch_size,
        n_val=data.n_val,
        n_test=data.n_test,
        workers=data.workers,
    )
    write_resolved_config(run_config, out_dir)
    return manifest


def build_vocabulary(run_config: RunConfig, manifest_path: Path, out_dir: Path) -> Vocabulary:
    """``build-vocab``: vocabulary from the train captions, written to ``vocab.txt``."""

    manifest = load_manifest(manifest_path)
    vocab = build_vocab(manifest, min_freq=run_config.data.min_freq)
    save_vocab(vocab, out_dir / VOCAB_NAME)
    write_resolved_config(run_config, out_dir)
    return vocab


def _replace_stage_in_loss_log(path: Path, stage: str) -> None:
    """Drop ``stage`` records from an existing log so a rerun rewrites them."""

    if not path.is_file():
        return
    kept = [record for record in read_loss_log(path) if record.stage != stage]
    path.write_text("".join(record.to_json() + "\n" for record in kept), encoding="utf-8")


def _write_loss_artifacts(out_dir: Path, run_id: str, records: Sequence[LossRecord]) -> None:
    append_loss_records(out_dir / RUN_STORE_NAME, run_id, records)
    all_records = read_loss_log(out_dir / LOSS_LOG_NAME)
    save_chart(build_loss_curve_chart(build_loss_chart_rows(all_records)), out_dir / "loss_curve.html")


def _load_inputs(manifest_path: Path, vocab_path: Path) -> tuple[DatasetManifest, Vocabulary]:
    return load_manifest(manifest_path), load_vocab(vocab_path)


def run_adaptation(
    run_config: RunConfig,
    manifest_path: Path,
    vocab_path: Path,
    out_dir: Path,
    *,
    init_path: Path | None = None,
    device: str = "cpu",
) -> TrainResult:
    """``adapt``: contrastive adaptation, checkpoint and loss artifacts."""

    manifest, vocab = _load_inputs(manifest_path, vocab_path)
    init = load_checkpoint(init_path) if init_path is not None else None
    loss_log = out_dir / LOSS_LOG_NAME
    _replace_stage_in_loss_log(loss_log, "adapt")

    result = train_adapt(
        manifest,
        vocab,
        run_config.model,
        run_config.adapt,
        init=init,
        device=device,
        loss_log_path=loss_log,
    )
    save_checkpoint(result.checkpoint, out_dir / (run_config.adapt.checkpoint_out or ADAPT_CHECKPOINT_NAME))
    write_resolved_config(run_config, out_dir)
    _write_loss_artifacts(out_dir, run_id_for(out_dir, run_config), result.records)
    return result


def run_captioning(
    run_config: RunConfig,
    manifest_path: Path,
    vocab_path: Path,
    out_dir: Path,
    *,
    init_path: Path | None = None,
    device: str = "cpu",
) -> TrainResult:
    """``caption-train``: captioning fine-tune from an optional init checkpoint.

    Without ``init_path`` the vision encoder starts from random weights (the
    no-adaptation arm).
    """

    manifest, vocab = _load_inputs(manifest_path, vocab_path)
    init_path = init_path or (Path(run_config.caption.checkpoint_in) if run_config.caption.checkpoint_in else None)
    init = load_checkpoint(init_path) if init_path is not None else None
    loss_log = out_dir / LOSS_LOG_NAME
    _replace_stage_in_loss_log(loss_log, "caption")

    result = train_caption(
        manifest,
        vocab,
        run_config.model,
        run_config.caption,
        init=init,
        device=device,
        loss_log_path=loss_log,
    )
    save_checkpoint(
        result.checkpoint, out_dir / (run_config.caption.checkpoint_out or CAPTION_CHECKPOINT_NAME)
    )
    write_resolved_config(run_config, out_dir)
    _write_loss_artifacts(out_dir, run_id_for(out_dir, run_config), result.records)
    return result


def run_eval_retrieval(
    run_config: RunConfig,
    checkpoint_path: Path,
    manifest_path: Path,
    vocab_path: Path,
    out_dir: Path,
    *,
    split: str = "test",
    device: str = "cpu",
) -> MetricReport:
    manifest, vocab = _load_inputs(manifest_path, vocab_path)
    report = eval_retrieval(
        load_checkpoint(checkpoint_path),
        manifest,
        vocab,
        split,
        ks=run_config.eval.recall_ks,
        config_digest=config_digest(run_config),
        device=device,
    )
    write_report(report, out_dir / "retrieval_report.json")
    write_resolved_config(run_config, out_dir)
    return report


def run_eval_caption(
    run_config: RunConfig,
    checkpoint_path: Path,
    manifest_path: Path,
    vocab_path: Path,
    out_dir: Path,
    *,
    split: str = "test",
    device: str = "cpu",
) -> CaptionEvaluation:
    manifest, vocab = _load_inputs(manifest_path, vocab_path)
    checkpoint = load_checkpoint(checkpoint_path)
    evaluation = eval_captioning(
        checkpoint,
        manifest,
        vocab,
        split,
        eval_config=run_config.eval,
        max_steps=run_config.decode_max_steps(checkpoint.header.model_config),
        config_digest=config_digest(run_config),
        device=device,
    )
    write_report(evaluation.report, out_dir / "caption_report.json")
    write_predictions(evaluation.predictions, out_dir / "predictions.jsonl")
    write_resolved_config(run_config, out_dir)
    return evaluation


def _load_pair_tensors(
    before_path: Path, after_path: Path, image_size: int, device: str
) -> tuple[np.ndarray, np.ndarray, torch.Tensor, torch.Tensor]:
    before = load_image(before_path)
    after = load_image(after_path)
    expected = (image_size, image_size, 3)
    for path, image in ((before_path, before), (after_path, after)):
        if image.shape != expected:
            raise DataError(f"{path}: image shape {image.shape} does not match {expected}")
    return (
        before,
        after,
        images_to_tensor([before], device=device),
        images_to_tensor([after], device=device),
    )


def decode_pair(
    run_config: RunConfig,
    checkpoint_path: Path,
    vocab_path: Path,
    before_path: Path,
    after_path: Path,
    *,
    device: str = "cpu",
) -> str:
    """``decode``: one caption for one image pair."""

    vocab = load_vocab(vocab_path)
    checkpoint = load_checkpoint(checkpoint_path)
    model = load_caption_model(checkpoint, device=device)
    resolve_model_config(model.config, vocab)
    _, _, before, after = _load_pair_tensors(
        before_path, after_path, model.config.image_size, device
    )
    max_steps = run_config.decode_max_steps(model.config)
    return decode_captions(model, vocab, before, after, max_steps)[0]


def run_export_attention(
    checkpoint_path: Path,
    before_path: Path,
    after_path: Path,
    out_dir: Path,
    *,
    device: str = "cpu",
) -> dict[str, Any]:
    """``export-attention``: attention matrices, heatmaps and changed-patch mass.

    Works with adaptation and captioning checkpoints alike (only the vision
    encoder is used).
    """

    checkpoint = load_checkpoint(checkpoint_path)
    if checkpoint.stage == "adapt":
        vision = load_adaptation_model(checkpoint, device=device).vision
    else:
        vision = load_caption_model(checkpoint, device=device).vision
    config = vision.config

    before_image, after_image, before, after = _load_pair_tensors(
        before_path, after_path, config.image_size, device
    )
    maps = export_attention(vision, before, after)
    heatmaps = attention_heatmaps(maps)

    changed = patch_change_mask(difference_mask(before_image, after_image), config.patch_size)
    masses = []
    if changed.any() and not changed.all():
        for layer, (first, second) in enumerate(heatmaps["inter"]):
            mass_before, baseline = changed_patch_mass(first, changed)
            mass_after, _ = changed_patch_mass(second, changed)
            masses.append(
                {"layer": layer, "before": mass_before, "after": mass_after, "baseline": baseline}
            )

    document = {
        "checkpoint_stage": checkpoint.stage,
        "grid_size": maps.grid_size,
        "intra": [
            {"layer": layer, "before": first.tolist(), "after": second.tolist()}
            for layer, (first, second) in enumerate(zip(maps.intra_before, maps.intra_after))
        ],
        "inter": [{"layer": layer, "weights": weights.tolist()} for layer, weights in enumerate(maps.inter)],
        "heatmaps": {
            stage: [
                {"layer": layer, "before": first.tolist(), "after": second.tolist()}
                for layer, (first, second) in enumerate(layers)
            ]
            for stage, layers in heatmaps.items()
        },
        "changed_patch_mass": masses,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "attention.json").write_text(json.dumps(document) + "\n", encoding="utf-8")
    save_chart(build_attention_heatmap_chart(build_heatmap_rows(heatmaps)), out_dir / "attention.html")
    logger.info("Exported attention for %s / %s to %s", before_path, after_path, out_dir)
    return document


def parse_splits(text: str) -> list[tuple[int, int]]:
    """Parse ``"3:1,4:0"`` into ``[(3, 1), (4, 0)]``.

    Raises
    ------
    ConfigError
        On malformed entries, ``n_intra < 1``, ``n_inter < 0``, or splits that
        do not share one total depth.
    """

    splits: list[tuple[int, int]] = []
    for part in text.split(","):
        part = part.strip()
        left, sep, right = part.partition(":")
        if not sep:
            raise ConfigError(f"split must look like N_intra:N_inter, got {part!r}")
        try:
            n_intra, n_inter = int(left), int(right)
        except ValueError as exc:
            raise ConfigError(f"split must look like N_intra:N_inter, got {part!r}") from exc
        if n_intra < 1 or n_inter < 0:
            raise ConfigError(f"invalid split {part!r}: need N_intra >= 1 and N_inter >= 0")
        splits.append((n_intra, n_inter))
    if not splits:
        raise ConfigError("no splits given")
    depths = {n_intra + n_inter for n_intra, n_inter in splits}
    if len(depths) != 1:
        raise ConfigError(f"splits must share one total depth, got depths {sorted(depths)}")
    return splits


def _with_seed(run_config: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(
        run_config,
        data=dataclasses.replace(run_config.data, seed=seed),
        adapt=dataclasses.replace(run_config.adapt, seed=seed),
        caption=dataclasses.replace(run_config.caption, seed=seed),
    )


def _caption_scores(evaluation: CaptionEvaluation, bleu_max_n: int) -> tuple[float, float, float]:
    captioning = evaluation.report.captioning or {}
    return (
        float(captioning[f"BLEU-{bleu_max_n}"]),
        float(captioning["ROUGE-L"]),
        float(captioning["CIDEr-D"]),
    )


def _write_table(path: Path, rows: Sequence[Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"rows": [dataclasses.asdict(row) for row in rows]}
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_layer_sweep(
    run_config: RunConfig,
    manifest_path: Path,
    vocab_path: Path,
    splits: Sequence[tuple[int, int]],
    out_dir: Path,
    *,
    seeds: Sequence[int] | None = None,
    split: str = "test",
    device: str = "cpu",
) -> list[SweepRow]:
    """``sweep-layers``: adaptation, retrieval, frozen-encoder captioning per split.

    For every seed and every ``(n_intra, n_inter)`` split at a fixed total
    depth: adapt, evaluate retrieval in both directions, train the captioner
    on the frozen adapted encoder, and score captions.
    """

    manifest, vocab = _load_inputs(manifest_path, vocab_path)
    if len({a + b for a, b in splits}) != 1:
        raise ConfigError("splits must share one total depth")
    seeds = list(seeds) if seeds else [run_config.adapt.seed]
    run_id = run_id_for(out_dir, run_config)
    ks = tuple(sorted(set(run_config.eval.recall_ks) | {1, 5, 10}))

    rows: list[SweepRow] = []
    for seed in seeds:
        for n_intra, n_inter in splits:
            config = _with_seed(run_config, seed)
            config = dataclasses.replace(
                config,
                model=dataclasses.replace(config.model, n_intra=n_intra, n_inter=n_inter),
                caption=dataclasses.replace(config.caption, freeze_vision=True),
            )
            logger.info("Sweep seed=%s split %s:%s", seed, n_intra, n_inter)
            adapted = train_adapt(manifest, vocab, config.model, config.adapt, device=device)
            retrieval = eval_retrieval(
                adapted.checkpoint, manifest, vocab, split, ks=ks, device=device
            ).retrieval or {}
            captioned = train_caption(
                manifest, vocab, config.model, config.caption, init=adapted.checkpoint, device=device
            )
            evaluation = eval_captioning(
                captioned.checkpoint,
                manifest,
                vocab,
                split,
                eval_config=config.eval,
                max_steps=config.decode_max_steps(),
                device=device,
            )
            bleu4, rouge, cider = _caption_scores(evaluation, config.eval.bleu_max_n)
            p2t, t2p = retrieval["pair_to_text"], retrieval["text_to_pair"]
            rows.append(
                SweepRow(
                    run_id=run_id,
                    seed=seed,
                    n_intra=n_intra,
                    n_inter=n_inter,
                    pair_to_text_r1=p2t["R@1"],
                    pair_to_text_r5=p2t["R@5"],
                    pair_to_text_r10=p2t["R@10"],
                    pair_to_text_mdr=p2t["MdR"],
                    pair_to_text_mnr=p2t["MnR"],
                    text_to_pair_r1=t2p["R@1"],
                    text_to_pair_r5=t2p["R@5"],
                    text_to_pair_r10=t2p["R@10"],
                    text_to_pair_mdr=t2p["MdR"],
                    text_to_pair_mnr=t2p["MnR"],
                    bleu4=bleu4,
                    rouge_l=rouge,
                    cider_d=cider,
                )
            )

    append_sweep_rows(out_dir / RUN_STORE_NAME, rows)
    _write_table(out_dir / "sweep.json", rows)
    write_resolved_config(run_config, out_dir)
    return rows


def _train_arm(
    arm: str,
    config: RunConfig,
    manifest: DatasetManifest,
    vocab: Vocabulary,
    device: str,
) -> Checkpoint:
    if arm == "direct-ft":
        depth = config.model.vision_depth
        model_config = dataclasses.replace(config.model, n_intra=depth, n_inter=0)
        return train_caption(manifest, vocab, model_config, config.caption, device=device).checkpoint
    if arm == "no-adapt":
        return train_caption(manifest, vocab, config.model, config.caption, device=device).checkpoint
    if arm == "adapt":
        adapted = train_adapt(manifest, vocab, config.model, config.adapt, device=device)
        return train_caption(
            manifest, vocab, config.model, config.caption, init=adapted.checkpoint, device=device
        ).checkpoint
    raise ConfigError(f"unknown ablation arm {arm!r}")


def run_adaptation_ablation(
    run_config: RunConfig,
    manifest_path: Path,
    vocab_path: Path,
    out_dir: Path,
    *,
    seeds: Sequence[int] | None = None,
    arms: Sequence[str] = ("direct-ft", "no-adapt", "adapt"),
    split: str = "test",
    device: str = "cpu",
) -> list[AblationRow]:
    """``ablate-adapt``: captioning with and without the adaptation stage.

    Arms, all on the same data and seed:

    - ``direct-ft``: all vision layers intra-image (no joint stage), no adaptation
    - ``no-adapt``: intra/inter encoder from random weights, no adaptation
    - ``adapt``: the full adapt-then-fine-tune pipeline
    """

    manifest, vocab = _load_inputs(manifest_path, vocab_path)
    seeds = list(seeds) if seeds else [run_config.adapt.seed]
    run_id = run_id_for(out_dir, run_config)

    rows: list[AblationRow] = []
    for seed in seeds:
        config = _with_seed(run_config, seed)
        for arm in arms:
            logger.info("Ablation seed=%s arm=%s", seed, arm)
            checkpoint = _train_arm(arm, config, manifest, vocab, device)
            evaluation = eval_captioning(
                checkpoint,
                manifest,
                vocab,
                split,
                eval_config=config.eval,
                max_steps=config.decode_max_steps(),
                device=device,
            )
            bleu4, rouge, cider = _caption_scores(evaluation, config.eval.bleu_max_n)
            rows.append(
                AblationRow(
                    run_id=run_id, seed=seed, arm=arm, bleu4=bleu4, rouge_l=rouge, cider_d=cider
                )
            )

    append_ablation_rows(out_dir / RUN_STORE_NAME, rows)
    _write_table(out_dir / "ablation.json", rows)
    write_resolved_config(run_config, out_dir)
    return rows


def query_run_store(
    out_dir: Path, table: str, *, run_id: str | None = None
) -> list[dict[str, Any]]:
    """``runs``: JSON-safe rows of one run-store table (empty if the store is missing)."""

    db_path = out_dir / RUN_STORE_NAME
    if table == LOSS_TABLE:
        return [
            {"run_id": rid, **dataclasses.asdict(record)}
            for rid, record in fetch_loss_records(db_path, run_id=run_id)
        ]
    if table == SWEEP_TABLE:
        return [dataclasses.asdict(row) for row in fetch_sweep_rows(db_path, run_id=run_id)]
    if table == ABLATION_TABLE:
        return [dataclasses.asdict(row) for row in fetch_ablation_rows(db_path, run_id=run_id)]
    raise ConfigError(f"unknown table {table!r}; expected one of {TABLES}")


def export_run_table(out_dir: Path, table: str, csv_path: Path) -> Path:
    """``runs --csv``: export one run-store table."""

    return export_table_csv(out_dir / RUN_STORE_NAME, table, csv_path)


def reset_runs(out_dir: Path) -> None:
    """``runs --reset``: drop the run-store tables of ``out_dir``."""

    reset_run_store(out_dir / RUN_STORE_NAME)
