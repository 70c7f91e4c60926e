from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from diffcap import services
from diffcap.config import RunConfig, load_run_config
from diffcap.errors import ConfigError, DataError
from diffcap.manifest import load_manifest, save_image
from diffcap.run_store import fetch_ablation_rows, fetch_loss_records, fetch_sweep_rows
from diffcap.training import read_loss_log


TINY_OVERRIDES = {
    "model.image_size": 16,
    "model.patch_size": 8,
    "model.d_image": 8,
    "model.d_text": 8,
    "model.heads": 2,
    "model.n_intra": 1,
    "model.n_inter": 1,
    "model.n_text_layers": 1,
    "model.n_caption_encoder": 1,
    "model.n_caption_decoder": 1,
    "model.dropout": 0.0,
    "model.max_len": 12,
    "adapt.epochs": 1,
    "adapt.batch_size": 4,
    "caption.epochs": 1,
    "caption.batch_size": 4,
    "data.n_pairs": 12,
    "data.n_val": 4,
    "data.n_test": 6,
}


def tiny_run_config(**extra: object) -> RunConfig:
    return load_run_config(overrides={**TINY_OVERRIDES, **extra}, seed=5)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """gen-data, build-vocab, adapt and caption-train into one directory."""

    out = tmp_path_factory.mktemp("pipeline")
    run_config = tiny_run_config()
    services.generate_dataset(run_config, out)
    services.build_vocabulary(run_config, out / services.MANIFEST_NAME, out)
    services.run_adaptation(run_config, out / services.MANIFEST_NAME, out / services.VOCAB_NAME, out)
    services.run_captioning(
        run_config,
        out / services.MANIFEST_NAME,
        out / services.VOCAB_NAME,
        out,
        init_path=out / services.ADAPT_CHECKPOINT_NAME,
    )
    return out


def _first_test_pair(out: Path) -> tuple[Path, Path]:
    manifest = load_manifest(out / services.MANIFEST_NAME)
    record = manifest.split("test")[0]
    return manifest.resolve(record.before), manifest.resolve(record.after)


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("3:1", [(3, 1)]),
        ("3:1,4:0, 2:2", [(3, 1), (4, 0), (2, 2)]),
    ],
)
def test_parse_splits_valid(text: str, expected: list[tuple[int, int]]) -> None:
    assert services.parse_splits(text) == expected


@pytest.mark.parametrize(
    ("text", "match"),
    [
        ("3-1", "N_intra:N_inter"),
        ("a:b", "N_intra:N_inter"),
        ("0:4", "N_intra >= 1"),
        ("5:-1", "N_inter >= 0"),
        ("3:1,2:1", "one total depth"),
    ],
)
def test_parse_splits_rejects_bad_input(text: str, match: str) -> None:
    with pytest.raises(ConfigError, match=match):
        services.parse_splits(text)


def test_pipeline_writes_every_artifact(pipeline_dir: Path) -> None:
    for name in (
        "manifest.jsonl",
        "vocab.txt",
        "adapt.safetensors",
        "caption.safetensors",
        "loss_log.jsonl",
        "loss_curve.html",
        "runs.duckdb",
        "resolved_config.json",
    ):
        assert (pipeline_dir / name).is_file(), name

    manifest = load_manifest(pipeline_dir / services.MANIFEST_NAME)
    assert {split: len(ids) for split, ids in manifest.splits.items()} == {
        "train": 12,
        "val": 4,
        "test": 6,
    }
    resolved = json.loads((pipeline_dir / "resolved_config.json").read_text(encoding="utf-8"))
    assert resolved["values"]["data.seed"] == 5


def test_pipeline_logs_both_stages(pipeline_dir: Path) -> None:
    records = read_loss_log(pipeline_dir / services.LOSS_LOG_NAME)

    assert [record.stage for record in records] == ["adapt", "caption"]
    stored = fetch_loss_records(pipeline_dir / services.RUN_STORE_NAME)
    assert {record.stage for _, record in stored} == {"adapt", "caption"}
    run_ids = {run_id for run_id, _ in stored}
    assert run_ids == {services.run_id_for(pipeline_dir, tiny_run_config())}


def test_rerunning_adaptation_rewrites_its_loss_records(pipeline_dir: Path, tmp_path: Path) -> None:
    run_config = tiny_run_config()
    manifest_path = pipeline_dir / services.MANIFEST_NAME
    vocab_path = pipeline_dir / services.VOCAB_NAME

    services.run_adaptation(run_config, manifest_path, vocab_path, tmp_path)
    first_log = (tmp_path / services.LOSS_LOG_NAME).read_bytes()
    first_checkpoint = (tmp_path / services.ADAPT_CHECKPOINT_NAME).read_bytes()
    services.run_adaptation(run_config, manifest_path, vocab_path, tmp_path)

    assert (tmp_path / services.LOSS_LOG_NAME).read_bytes() == first_log
    assert (tmp_path / services.ADAPT_CHECKPOINT_NAME).read_bytes() == first_checkpoint


def test_run_captioning_uses_checkpoint_in_from_config(pipeline_dir: Path, tmp_path: Path) -> None:
    run_config = tiny_run_config(**{"caption.checkpoint_in": str(tmp_path / "missing.safetensors")})

    with pytest.raises(FileNotFoundError):
        services.run_captioning(
            run_config,
            pipeline_dir / services.MANIFEST_NAME,
            pipeline_dir / services.VOCAB_NAME,
            tmp_path,
        )


def test_run_eval_retrieval_writes_report(pipeline_dir: Path, tmp_path: Path) -> None:
    run_config = tiny_run_config()

    report = services.run_eval_retrieval(
        run_config,
        pipeline_dir / services.ADAPT_CHECKPOINT_NAME,
        pipeline_dir / services.MANIFEST_NAME,
        pipeline_dir / services.VOCAB_NAME,
        tmp_path,
    )

    payload = json.loads((tmp_path / "retrieval_report.json").read_text(encoding="utf-8"))
    assert payload == json.loads(report.to_json())
    assert payload["count"] == 6
    assert set(payload["retrieval"]) == {"pair_to_text", "text_to_pair"}


def test_run_eval_retrieval_rejects_caption_checkpoint(pipeline_dir: Path, tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="adapt checkpoint"):
        services.run_eval_retrieval(
            tiny_run_config(),
            pipeline_dir / services.CAPTION_CHECKPOINT_NAME,
            pipeline_dir / services.MANIFEST_NAME,
            pipeline_dir / services.VOCAB_NAME,
            tmp_path,
        )


def test_run_eval_caption_writes_report_and_predictions(pipeline_dir: Path, tmp_path: Path) -> None:
    evaluation = services.run_eval_caption(
        tiny_run_config(),
        pipeline_dir / services.CAPTION_CHECKPOINT_NAME,
        pipeline_dir / services.MANIFEST_NAME,
        pipeline_dir / services.VOCAB_NAME,
        tmp_path,
        split="val",
    )

    assert evaluation.report.count == 4
    payload = json.loads((tmp_path / "caption_report.json").read_text(encoding="utf-8"))
    assert set(payload["captioning"]) >= {"BLEU-4", "ROUGE-L", "CIDEr-D", "METEOR", "per_change_type"}
    lines = (tmp_path / "predictions.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 4


@pytest.mark.parametrize("decode_max_steps", [0, 12])
def test_run_eval_caption_bounds_decoding_by_checkpoint_max_len(
    pipeline_dir: Path, tmp_path: Path, decode_max_steps: int
) -> None:
    train_dir = tmp_path / "short"
    services.run_captioning(
        tiny_run_config(**{"model.max_len": 8}),
        pipeline_dir / services.MANIFEST_NAME,
        pipeline_dir / services.VOCAB_NAME,
        train_dir,
    )

    evaluation = services.run_eval_caption(
        tiny_run_config(**{"eval.decode_max_steps": decode_max_steps}),
        train_dir / services.CAPTION_CHECKPOINT_NAME,
        pipeline_dir / services.MANIFEST_NAME,
        pipeline_dir / services.VOCAB_NAME,
        tmp_path / "eval",
        split="val",
    )

    assert evaluation.report.count == 4
    for prediction in evaluation.predictions:
        assert len(prediction.caption.split()) <= 8


def test_decode_pair_returns_a_bounded_caption(pipeline_dir: Path) -> None:
    before, after = _first_test_pair(pipeline_dir)

    caption = services.decode_pair(
        tiny_run_config(),
        pipeline_dir / services.CAPTION_CHECKPOINT_NAME,
        pipeline_dir / services.VOCAB_NAME,
        before,
        after,
    )

    assert isinstance(caption, str)
    assert len(caption.split()) <= 10


def test_decode_pair_rejects_wrong_image_size(pipeline_dir: Path, tmp_path: Path) -> None:
    big = tmp_path / "big.png"
    save_image(np.zeros((32, 32, 3), dtype=np.uint8), big)
    before, _ = _first_test_pair(pipeline_dir)

    with pytest.raises(DataError, match="does not match"):
        services.decode_pair(
            tiny_run_config(),
            pipeline_dir / services.CAPTION_CHECKPOINT_NAME,
            pipeline_dir / services.VOCAB_NAME,
            before,
            big,
        )


@pytest.mark.parametrize(
    "checkpoint_name", [services.ADAPT_CHECKPOINT_NAME, services.CAPTION_CHECKPOINT_NAME]
)
def test_run_export_attention_writes_json_and_chart(
    pipeline_dir: Path, tmp_path: Path, checkpoint_name: str
) -> None:
    before, after = _first_test_pair(pipeline_dir)

    document = services.run_export_attention(pipeline_dir / checkpoint_name, before, after, tmp_path)

    assert document["grid_size"] == 2
    assert len(document["intra"]) == 1
    assert len(document["inter"]) == 1
    weights = np.asarray(document["inter"][0]["weights"])
    assert weights.shape == (2, 10, 10)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
    for entry in document["changed_patch_mass"]:
        assert 0.0 < entry["baseline"] < 1.0
        assert 0.0 <= entry["before"] <= 1.0
    saved = json.loads((tmp_path / "attention.json").read_text(encoding="utf-8"))
    assert saved["checkpoint_stage"] == document["checkpoint_stage"]
    assert (tmp_path / "attention.html").is_file()


def test_run_layer_sweep_rows_per_split(pipeline_dir: Path, tmp_path: Path) -> None:
    rows = services.run_layer_sweep(
        tiny_run_config(),
        pipeline_dir / services.MANIFEST_NAME,
        pipeline_dir / services.VOCAB_NAME,
        [(1, 1), (2, 0)],
        tmp_path,
    )

    assert [(row.n_intra, row.n_inter) for row in rows] == [(1, 1), (2, 0)]
    assert all(row.pair_to_text_r10 == 100.0 for row in rows)
    document = json.loads((tmp_path / "sweep.json").read_text(encoding="utf-8"))
    assert len(document["rows"]) == 2
    assert len(fetch_sweep_rows(tmp_path / services.RUN_STORE_NAME)) == 2


def test_run_layer_sweep_rejects_mixed_depths(pipeline_dir: Path, tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="one total depth"):
        services.run_layer_sweep(
            tiny_run_config(),
            pipeline_dir / services.MANIFEST_NAME,
            pipeline_dir / services.VOCAB_NAME,
            [(1, 1), (1, 0)],
            tmp_path,
        )


def test_run_adaptation_ablation_rows_per_arm(pipeline_dir: Path, tmp_path: Path) -> None:
    rows = services.run_adaptation_ablation(
        tiny_run_config(),
        pipeline_dir / services.MANIFEST_NAME,
        pipeline_dir / services.VOCAB_NAME,
        tmp_path,
        seeds=[3],
    )

    assert [row.arm for row in rows] == ["direct-ft", "no-adapt", "adapt"]
    assert all(row.seed == 3 for row in rows)
    assert all(0.0 <= row.cider_d <= 10.0 for row in rows)
    stored = fetch_ablation_rows(tmp_path / services.RUN_STORE_NAME)
    assert [row.arm for row in stored] == ["direct-ft", "no-adapt", "adapt"]
    assert (tmp_path / "ablation.json").is_file()


def test_query_run_store_returns_loss_rows_of_both_stages(pipeline_dir: Path) -> None:
    rows = services.query_run_store(pipeline_dir, "loss_log")

    assert {row["stage"] for row in rows} == {"adapt", "caption"}
    assert all(row["run_id"] and np.isfinite(row["loss"]) for row in rows)
    run_id = rows[0]["run_id"]
    assert services.query_run_store(pipeline_dir, "loss_log", run_id=run_id) == [
        row for row in rows if row["run_id"] == run_id
    ]
    assert services.query_run_store(pipeline_dir, "loss_log", run_id="missing") == []


def test_query_run_store_is_empty_without_a_store(tmp_path: Path) -> None:
    assert services.query_run_store(tmp_path, "sweep_results") == []


def test_query_run_store_rejects_unknown_table(pipeline_dir: Path) -> None:
    with pytest.raises(ConfigError, match="unknown table"):
        services.query_run_store(pipeline_dir, "events")


def test_export_run_table_writes_csv_with_header(pipeline_dir: Path, tmp_path: Path) -> None:
    path = services.export_run_table(pipeline_dir, "loss_log", tmp_path / "loss.csv")

    lines = path.read_text(encoding="utf-8").splitlines()
    assert "stage" in lines[0].split(",")
    assert len(lines) == len(services.query_run_store(pipeline_dir, "loss_log")) + 1


def test_reset_runs_drops_rows_and_keeps_the_file(pipeline_dir: Path, tmp_path: Path) -> None:
    shutil.copy(pipeline_dir / services.RUN_STORE_NAME, tmp_path / services.RUN_STORE_NAME)
    assert services.query_run_store(tmp_path, "loss_log")

    services.reset_runs(tmp_path)
    services.reset_runs(tmp_path)

    assert (tmp_path / services.RUN_STORE_NAME).is_file()
    assert services.query_run_store(tmp_path, "loss_log") == []
