"""Command-line entry point.

Each subcommand resolves a ``RunConfig`` (preset < ``--config`` TOML <
``--set key=value`` < ``--seed``), calls one function of ``diffcap.services``
and exits with:

- 0 on success
- 1 on a usage or configuration error
- 2 on a data error (missing or invalid files)
- 3 on a numerical failure

On failure exactly one JSON line ``{"error", "exit_code", "message"}`` is
written to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import torch

from diffcap import services
from diffcap.config import RunConfig, load_run_config, load_runtime_config
from diffcap.errors import ConfigError, exit_code_for
from diffcap.run_store import LOSS_TABLE, TABLES

logger = logging.getLogger(__name__)


COMMANDS = (
    "gen-data",
    "build-vocab",
    "adapt",
    "caption-train",
    "eval-retrieval",
    "eval-caption",
    "decode",
    "sweep-layers",
    "export-attention",
    "ablate-adapt",
    "runs",
)


class _ArgumentParser(argparse.ArgumentParser):
    """Raise ``ConfigError`` instead of printing usage and exiting with 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(f"{self.prog}: {message}")


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="diffcap", description="Image difference captioning: adapt, then fine-tune."
    )
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, help="TOML config file")
        sub.add_argument("--preset", default=None, help="desk (default) or full")
        sub.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE"
        )
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--out", type=Path, default=None, help="output directory")
        return sub

    def add_inputs(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--manifest", type=Path, default=None)
        sub.add_argument("--vocab", type=Path, default=None)

    sub = add("gen-data", "generate the Mini-Change dataset")
    sub.add_argument("--n", type=int, default=None, help="number of train pairs")

    sub = add("build-vocab", "build the vocabulary from train captions")
    sub.add_argument("--manifest", type=Path, default=None)

    sub = add("adapt", "adaptation stage (contrastive retrieval)")
    add_inputs(sub)
    sub.add_argument("--init", type=Path, default=None)

    sub = add("caption-train", "captioning stage")
    add_inputs(sub)
    sub.add_argument("--init", type=Path, default=None, help="checkpoint with vision tensors")
    sub.add_argument("--freeze-vision", action="store_true")

    for name, help_text in (
        ("eval-retrieval", "retrieval metrics of an adapt checkpoint"),
        ("eval-caption", "caption metrics of a caption checkpoint"),
    ):
        sub = add(name, help_text)
        add_inputs(sub)
        sub.add_argument("--checkpoint", type=Path, default=None)
        sub.add_argument("--split", default="test")

    sub = add("decode", "caption one image pair")
    sub.add_argument("--checkpoint", type=Path, default=None)
    sub.add_argument("--vocab", type=Path, default=None)
    sub.add_argument("--pair", nargs=2, type=Path, required=True, metavar=("BEFORE", "AFTER"))

    sub = add("sweep-layers", "intra/inter layer allocation sweep")
    add_inputs(sub)
    sub.add_argument("--splits", required=True, help="e.g. 3:1,4:0")
    sub.add_argument("--seeds", default=None, help="comma-separated seeds")
    sub.add_argument("--split", default="test")

    sub = add("export-attention", "attention matrices and heatmaps of one pair")
    sub.add_argument("--checkpoint", type=Path, required=True)
    sub.add_argument("--pair", nargs=2, type=Path, required=True, metavar=("BEFORE", "AFTER"))

    sub = add("ablate-adapt", "captioning with and without adaptation")
    add_inputs(sub)
    sub.add_argument("--seeds", default=None, help="comma-separated seeds")
    sub.add_argument("--split", default="test")

    sub = add("runs", "query, export or reset the run store")
    sub.add_argument("--table", default=LOSS_TABLE, choices=TABLES)
    sub.add_argument("--run-id", default=None)
    sub.add_argument("--csv", type=Path, default=None, help="export the table to this CSV file")
    sub.add_argument("--reset", action="store_true", help="drop every run-store table")

    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "n", None) is not None:
        overrides.append(f"data.n_pairs={args.n}")
    if getattr(args, "freeze_vision", False):
        overrides.append("caption.freeze_vision=true")
    return load_run_config(
        preset=args.preset or "desk",
        config_path=args.config,
        overrides=overrides,
        seed=args.seed,
    )


def _print_json(document: object) -> None:
    print(json.dumps(document, indent=2, sort_keys=True))


def _dispatch(args: argparse.Namespace, run_config: RunConfig, out: Path, device: str) -> None:
    manifest = getattr(args, "manifest", None) or out / services.MANIFEST_NAME
    vocab = getattr(args, "vocab", None) or out / services.VOCAB_NAME
    command = args.command

    if command == "gen-data":
        dataset = services.generate_dataset(run_config, out)
        print(f"wrote {len(dataset)} pairs to {out / services.MANIFEST_NAME}")
    elif command == "build-vocab":
        built = services.build_vocabulary(run_config, manifest, out)
        print(f"wrote {len(built)} tokens to {out / services.VOCAB_NAME}")
    elif command == "adapt":
        result = services.run_adaptation(
            run_config, manifest, vocab, out, init_path=args.init, device=device
        )
        print(f"adapt final loss {result.final_loss:.6f}")
    elif command == "caption-train":
        result = services.run_captioning(
            run_config, manifest, vocab, out, init_path=args.init, device=device
        )
        print(f"caption final loss {result.final_loss:.6f}")
    elif command == "eval-retrieval":
        checkpoint = args.checkpoint or out / services.ADAPT_CHECKPOINT_NAME
        report = services.run_eval_retrieval(
            run_config, checkpoint, manifest, vocab, out, split=args.split, device=device
        )
        _print_json(report.to_dict())
    elif command == "eval-caption":
        checkpoint = args.checkpoint or out / services.CAPTION_CHECKPOINT_NAME
        evaluation = services.run_eval_caption(
            run_config, checkpoint, manifest, vocab, out, split=args.split, device=device
        )
        _print_json(evaluation.report.to_dict())
    elif command == "decode":
        checkpoint = args.checkpoint or out / services.CAPTION_CHECKPOINT_NAME
        before, after = args.pair
        print(services.decode_pair(run_config, checkpoint, vocab, before, after, device=device))
    elif command == "sweep-layers":
        splits = services.parse_splits(args.splits)
        seeds = _parse_seeds(args.seeds) if args.seeds else None
        rows = services.run_layer_sweep(
            run_config, manifest, vocab, splits, out, seeds=seeds, split=args.split, device=device
        )
        for row in rows:
            print(
                f"seed={row.seed} {row.n_intra}:{row.n_inter} "
                f"IP-T R@1={row.pair_to_text_r1:.1f} T-IP R@1={row.text_to_pair_r1:.1f} "
                f"CIDEr-D={row.cider_d:.4f}"
            )
    elif command == "export-attention":
        before, after = args.pair
        services.run_export_attention(args.checkpoint, before, after, out, device=device)
        print(f"wrote {out / 'attention.json'}")
    elif command == "ablate-adapt":
        seeds = _parse_seeds(args.seeds) if args.seeds else None
        rows = services.run_adaptation_ablation(
            run_config, manifest, vocab, out, seeds=seeds, split=args.split, device=device
        )
        for row in rows:
            print(f"seed={row.seed} {row.arm}: BLEU-4={row.bleu4:.4f} CIDEr-D={row.cider_d:.4f}")
    elif command == "runs":
        if args.reset:
            services.reset_runs(out)
            print(f"reset {out / services.RUN_STORE_NAME}")
        elif args.csv is not None:
            print(f"wrote {services.export_run_table(out, args.table, args.csv)}")
        else:
            _print_json(services.query_run_store(out, args.table, run_id=args.run_id))
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown command {command!r}")


def _report_failure(exc: BaseException) -> int:
    code = exit_code_for(exc)
    line = json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)})
    print(line, file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and return the process exit code."""

    try:
        runtime = load_runtime_config()
        logging.basicConfig(
            level=runtime.log_level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        torch.set_num_threads(runtime.num_threads)

        args = build_parser().parse_args(argv)
        run_config = _resolve_config(args)
        out = args.out or runtime.output_dir
        _dispatch(args, run_config, out, runtime.device)
    except (Exception, SystemExit) as exc:
        if isinstance(exc, SystemExit):
            # --help exits cleanly through argparse.
            if exc.code in (0, None):
                return 0
            exc = ConfigError(str(exc))
        logger.debug("Command failed", exc_info=True)
        return _report_failure(exc)
    return 0


def run(argv: Sequence[str] | None = None) -> None:
    """Console-script entry point."""

    sys.exit(main(argv))


if __name__ == "__main__":
    run()
