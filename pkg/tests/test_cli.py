from __future__ import annotations

import json
from pathlib import Path

import pytest

from diffcap.cli import COMMANDS, _report_failure, build_parser, main
from diffcap.errors import NumericalError


TINY_SETTINGS = [
    "model.image_size=16",
    "model.patch_size=8",
    "model.d_image=8",
    "model.d_text=8",
    "model.heads=2",
    "model.n_intra=1",
    "model.n_inter=1",
    "model.n_text_layers=1",
    "model.n_caption_encoder=1",
    "model.n_caption_decoder=1",
    "model.dropout=0.0",
    "model.max_len=12",
    "caption.epochs=1",
    "caption.batch_size=4",
    "data.n_val=2",
    "data.n_test=2",
]


def _tiny(command: str, out: Path, *extra: str) -> list[str]:
    args = [command, "--out", str(out), "--seed", "11"]
    for setting in TINY_SETTINGS:
        args += ["--set", setting]
    return args + list(extra)


def _error_line(capsys: pytest.CaptureFixture[str]) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


def test_build_parser_knows_every_command() -> None:
    parser = build_parser()

    args = parser.parse_args(["sweep-layers", "--splits", "3:1,4:0", "--set", "adapt.epochs=2"])

    assert args.command == "sweep-layers"
    assert args.splits == "3:1,4:0"
    assert args.overrides == ["adapt.epochs=2"]


def test_help_exits_zero(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    for command in COMMANDS:
        assert command in out


def test_unknown_command_is_a_usage_error(capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["train-everything"]) == 1

    error = _error_line(capsys)
    assert error["exit_code"] == 1
    assert error["error"] == "ConfigError"


def test_missing_required_option_is_a_usage_error(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    assert main(["decode", "--out", str(tmp_path)]) == 1
    assert "--pair" in _error_line(capsys)["message"]


def test_unknown_config_key_exits_one(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["gen-data", "--out", str(tmp_path), "--set", "model.depth=3"])

    assert code == 1
    error = _error_line(capsys)
    assert set(error) == {"error", "exit_code", "message"}
    assert "model.depth" in error["message"]


def test_invalid_split_exits_one(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["sweep-layers", "--out", str(tmp_path), "--splits", "0:4"]) == 1
    assert "N_intra" in _error_line(capsys)["message"]


def test_missing_manifest_exits_two(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["build-vocab", "--out", str(tmp_path), "--manifest", str(tmp_path / "nope.jsonl")])

    assert code == 2
    assert _error_line(capsys)["exit_code"] == 2


def test_numerical_failure_maps_to_exit_three(capsys: pytest.CaptureFixture[str]) -> None:
    code = _report_failure(NumericalError("loss is nan"))

    assert code == 3
    assert _error_line(capsys) == {"error": "NumericalError", "exit_code": 3, "message": "loss is nan"}


def test_gen_data_vocab_caption_decode_end_to_end(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    assert main(_tiny("gen-data", tmp_path, "--n", "8")) == 0
    assert "wrote 12 pairs" in capsys.readouterr().out
    assert main(_tiny("build-vocab", tmp_path)) == 0
    assert main(_tiny("caption-train", tmp_path)) == 0
    assert (tmp_path / "caption.safetensors").is_file()
    capsys.readouterr()

    manifest_lines = (tmp_path / "manifest.jsonl").read_text(encoding="utf-8").splitlines()
    record = json.loads(manifest_lines[0])
    before, after = tmp_path / record["before"], tmp_path / record["after"]
    assert main(_tiny("decode", tmp_path, "--pair", str(before), str(after))) == 0

    out_lines = capsys.readouterr().out.splitlines()
    assert len(out_lines) == 1
    assert len(out_lines[0].split()) <= 10

    assert main(_tiny("eval-caption", tmp_path, "--split", "val")) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["count"] == 2
    assert report["captioning"]["METEOR"] is None


def test_eval_with_wrong_stage_checkpoint_exits_one(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    assert main(_tiny("gen-data", tmp_path, "--n", "6")) == 0
    assert main(_tiny("build-vocab", tmp_path)) == 0
    assert main(_tiny("caption-train", tmp_path)) == 0
    capsys.readouterr()

    code = main(_tiny("eval-retrieval", tmp_path, "--checkpoint", str(tmp_path / "caption.safetensors")))

    assert code == 1
    assert "adapt checkpoint" in _error_line(capsys)["message"]


def test_runs_queries_exports_and_resets_the_store(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    assert main(_tiny("gen-data", tmp_path, "--n", "6")) == 0
    assert main(_tiny("build-vocab", tmp_path)) == 0
    assert main(_tiny("caption-train", tmp_path)) == 0
    capsys.readouterr()

    assert main(["runs", "--out", str(tmp_path)]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows and {row["stage"] for row in rows} == {"caption"}

    csv_path = tmp_path / "loss.csv"
    assert main(["runs", "--out", str(tmp_path), "--csv", str(csv_path)]) == 0
    assert f"wrote {csv_path}" in capsys.readouterr().out
    assert len(csv_path.read_text(encoding="utf-8").splitlines()) == len(rows) + 1

    assert main(["runs", "--out", str(tmp_path), "--reset"]) == 0
    capsys.readouterr()
    assert main(["runs", "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out) == []


def test_runs_rejects_unknown_table(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["runs", "--out", str(tmp_path), "--table", "events"]) == 1
    assert _error_line(capsys)["exit_code"] == 1
