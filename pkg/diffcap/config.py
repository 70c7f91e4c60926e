"""Centralized, environment-aware configuration.

Two layers live here:

- ``RuntimeConfig``: process-level settings (output dir, log level, device,
  thread count) read from the environment and an optional repo-root ``.env``.
- ``RunConfig``: experiment hyperparameters, addressed through a flat
  dotted-key namespace (``model.d_image``, ``adapt.epochs``, ...). Values come
  from a preset, then a TOML config file, then ``key=value`` overrides.

Notes
-----
- Configuration is read at call time (not import time) so tests and repeated
  CLI invocations in one process stay predictable.
- Unknown dotted keys are rejected; a typo must never silently fall back to a
  default.

Environment Variables
---------------------
- ``DIFFCAP_OUTPUT_DIR``: Default output directory. Default: ``runs``
- ``DIFFCAP_LOG_LEVEL``: Logging level name. Default: ``INFO``
- ``DIFFCAP_NUM_THREADS``: torch intra-op threads. Default: ``1``
- ``DIFFCAP_DEVICE``: torch device string. Default: ``cpu``
- ``DIFFCAP_DISABLE_DOTENV``: Disable auto-loading repo-root ``.env``. Default: ``0``
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from diffcap.errors import ConfigError

logger = logging.getLogger(__name__)


DEFAULT_DOTENV_PATH = Path(__file__).resolve().parents[1] / ".env"

LOG_LEVELS = frozenset({"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"})
STAGES = ("adapt", "caption")


def _strip_wrapping_quotes(value: str) -> str:
    """Strip a single pair of wrapping quotes."""

    if len(value) >= 2 and value[0] == value[-1] and value[0] in {"'", '"'}:
        return value[1:-1]
    return value


def _read_dotenv_if_present(dotenv_path: Path) -> dict[str, str]:
    """Read a `.env` file into a mapping.

    Rules
    -----
    - Missing file: returns an empty mapping.
    - Supports lines of the form: `KEY=VALUE` (optionally prefixed with `export `).
    - Ignores blank lines and `#` comments.

    Parameters
    ----------
    dotenv_path:
        Path to the `.env` file.
    """

    if not dotenv_path.exists():
        return {}

    if not dotenv_path.is_file():
        raise ConfigError(f"dotenv path is not a file: {dotenv_path}")

    parsed: dict[str, str] = {}

    for raw_line in dotenv_path.read_text(encoding="utf-8").splitlines():
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("export "):
            line = line.removeprefix("export ").strip()

        if "=" not in line:
            continue

        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            continue

        parsed[key] = _strip_wrapping_quotes(value.strip())

    logger.info("Read dotenv file: %s", dotenv_path)
    return parsed


def _get_config_value(
    key: str,
    *,
    dotenv_values: dict[str, str],
    default: str,
) -> str:
    """Return a config value with precedence: env > dotenv > default."""

    env_value = os.getenv(key)
    if env_value is not None:
        return env_value
    if key in dotenv_values:
        return dotenv_values[key]
    return default


def _parse_bool(raw_value: str, *, var_name: str) -> bool:
    """Parse a boolean setting.

    Raises
    ------
    ConfigError
        If the value is not recognized.
    """

    normalized = raw_value.strip().lower()
    if normalized in {"1", "true", "yes", "y", "on"}:
        return True
    if normalized in {"0", "false", "no", "n", "off"}:
        return False
    raise ConfigError(f"{var_name} must be a boolean, got {raw_value!r}")


def _parse_int(raw_value: str, *, var_name: str) -> int:
    try:
        return int(raw_value)
    except ValueError as exc:
        raise ConfigError(f"{var_name} must be an integer, got {raw_value!r}") from exc


def _parse_positive_int(raw_value: str, *, var_name: str) -> int:
    """Parse and validate a positive integer.

    Raises
    ------
    ConfigError
        If the value is not a positive integer.
    """

    parsed = _parse_int(raw_value, var_name=var_name)
    if parsed <= 0:
        raise ConfigError(f"{var_name} must be > 0, got {parsed}")
    return parsed


def _parse_float(raw_value: str, *, var_name: str) -> float:
    try:
        return float(raw_value)
    except ValueError as exc:
        raise ConfigError(f"{var_name} must be a number, got {raw_value!r}") from exc


def _parse_int_tuple(raw_value: str, *, var_name: str) -> tuple[int, ...]:
    parts = [part.strip() for part in raw_value.strip().strip("[]()").split(",")]
    parts = [part for part in parts if part]
    if not parts:
        raise ConfigError(f"{var_name} must be a non-empty list of integers")
    return tuple(_parse_int(part, var_name=var_name) for part in parts)


@dataclass(frozen=True, slots=True)
class RuntimeConfig:
    """Process-level runtime settings.

    Parameters
    ----------
    output_dir:
        Directory that receives artifacts when a command does not name one.
    log_level:
        Root logging level name.
    num_threads:
        Number of torch intra-op threads. One thread keeps float reductions in
        a fixed order, which the determinism guarantees rely on.
    device:
        torch device string used for training and evaluation.
    """

    output_dir: Path
    log_level: str
    num_threads: int
    device: str


def load_runtime_config() -> RuntimeConfig:
    """Load runtime configuration (env > dotenv > default)."""

    disable_dotenv = _parse_bool(
        os.getenv("DIFFCAP_DISABLE_DOTENV", "0"),
        var_name="DIFFCAP_DISABLE_DOTENV",
    )
    dotenv_values = {} if disable_dotenv else _read_dotenv_if_present(DEFAULT_DOTENV_PATH)

    output_dir_str = _get_config_value(
        "DIFFCAP_OUTPUT_DIR", dotenv_values=dotenv_values, default="runs"
    )
    log_level = _get_config_value(
        "DIFFCAP_LOG_LEVEL", dotenv_values=dotenv_values, default="INFO"
    ).strip().upper()
    num_threads_str = _get_config_value(
        "DIFFCAP_NUM_THREADS", dotenv_values=dotenv_values, default="1"
    )
    device = _get_config_value(
        "DIFFCAP_DEVICE", dotenv_values=dotenv_values, default="cpu"
    ).strip()

    if log_level not in LOG_LEVELS:
        raise ConfigError(
            f"DIFFCAP_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {log_level!r}"
        )
    if not device:
        raise ConfigError("DIFFCAP_DEVICE must be a non-empty string")

    config = RuntimeConfig(
        output_dir=Path(output_dir_str),
        log_level=log_level,
        num_threads=_parse_positive_int(num_threads_str, var_name="DIFFCAP_NUM_THREADS"),
        device=device,
    )

    logger.info(
        "Loaded runtime config: output_dir=%s log_level=%s num_threads=%s device=%s",
        config.output_dir,
        config.log_level,
        config.num_threads,
        config.device,
    )
    return config


@dataclass(frozen=True, slots=True)
class ModelConfig:
    """Architecture hyperparameters shared by both training stages.

    Parameters
    ----------
    image_size:
        Square image side in pixels.
    patch_size:
        Patch side (convolution kernel and stride).
    d_image:
        Vision Transformer width.
    d_text:
        Text encoder and captioner width; also the output width of the
        vision projection.
    heads:
        Attention heads in every Transformer block.
    n_intra, n_inter:
        Layers in the per-image and joint-pair vision stages.
    n_text_layers:
        Layers in the adaptation-stage language encoder.
    n_caption_encoder, n_caption_decoder:
        Layers in the captioner.
    dropout:
        Dropout probability inside attention and MLP sublayers.
    max_len:
        Fixed token sequence length, bos and eos included.
    vocab_size:
        Vocabulary size; ``0`` until resolved from a vocabulary.
    """

    image_size: int = 64
    patch_size: int = 16
    d_image: int = 64
    d_text: int = 64
    heads: int = 4
    n_intra: int = 3
    n_inter: int = 1
    n_text_layers: int = 2
    n_caption_encoder: int = 2
    n_caption_decoder: int = 2
    dropout: float = 0.1
    max_len: int = 16
    vocab_size: int = 0

    def __post_init__(self) -> None:
        if self.patch_size <= 0 or self.image_size <= 0:
            raise ConfigError("model.image_size and model.patch_size must be > 0")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"model.image_size ({self.image_size}) must be divisible by "
                f"model.patch_size ({self.patch_size})"
            )
        if self.heads <= 0:
            raise ConfigError("model.heads must be > 0")
        for name in ("d_image", "d_text"):
            width = getattr(self, name)
            if width <= 0 or width % self.heads != 0:
                raise ConfigError(
                    f"model.{name} ({width}) must be positive and divisible by "
                    f"model.heads ({self.heads})"
                )
        if self.n_intra < 1:
            raise ConfigError(f"model.n_intra must be >= 1, got {self.n_intra}")
        for name in ("n_inter", "n_text_layers", "n_caption_encoder", "n_caption_decoder"):
            if getattr(self, name) < 0:
                raise ConfigError(f"model.{name} must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")
        if self.max_len < 3:
            raise ConfigError(f"model.max_len must be >= 3, got {self.max_len}")
        if self.vocab_size != 0 and self.vocab_size < 5:
            raise ConfigError(f"model.vocab_size must be 0 or >= 5, got {self.vocab_size}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        """Patches per image, ``(image_size / patch_size) ** 2``."""

        return self.grid_size**2

    @property
    def vision_depth(self) -> int:
        return self.n_intra + self.n_inter


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Optimization settings for one training stage.

    ``lr_adapt`` drives every parameter in the adaptation stage. In the
    captioning stage the vision encoder uses ``lr_vision`` and the captioner
    uses ``lr_caption``. ``max_steps == 0`` means "no step cap".
    """

    stage: str = "adapt"
    epochs: int = 12
    batch_size: int = 16
    lr_vision: float = 1e-3
    lr_caption: float = 1e-3
    lr_adapt: float = 1e-3
    beta2: float = 0.999
    grad_clip: float = 1.0
    seed: int = 42
    freeze_vision: bool = False
    drop_last: bool = False
    max_steps: int = 0
    checkpoint_in: str = ""
    checkpoint_out: str = ""

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError(f"{self.stage}.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"{self.stage}.batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_vision", "lr_caption", "lr_adapt"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{self.stage}.{name} must be > 0")
        if not 0.0 < self.beta2 < 1.0:
            raise ConfigError(f"{self.stage}.beta2 must be in (0, 1)")
        if self.grad_clip <= 0:
            raise ConfigError(f"{self.stage}.grad_clip must be > 0")
        if self.max_steps < 0:
            raise ConfigError(f"{self.stage}.max_steps must be >= 0")


@dataclass(frozen=True, slots=True)
class DataConfig:
    """Synthetic dataset and vocabulary settings."""

    seed: int = 42
    n_pairs: int = 600
    n_val: int = 60
    n_test: int = 100
    min_freq: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_pairs < 6:
            raise ConfigError(f"data.n_pairs must be >= 6, got {self.n_pairs}")
        if self.n_val < 0 or self.n_test < 0:
            raise ConfigError("data.n_val and data.n_test must be >= 0")
        if self.min_freq < 1:
            raise ConfigError("data.min_freq must be >= 1")
        if self.workers < 1:
            raise ConfigError("data.workers must be >= 1")


@dataclass(frozen=True, slots=True)
class EvalConfig:
    """Metric constants and decoding settings.

    ``decode_max_steps == 0`` means ``model.max_len - 2``.
    """

    recall_ks: tuple[int, ...] = (1, 5, 10)
    bleu_max_n: int = 4
    rouge_beta2: float = 1.44
    cider_max_n: int = 4
    cider_sigma: float = 6.0
    decode_max_steps: int = 0

    def __post_init__(self) -> None:
        if not self.recall_ks or any(k < 1 for k in self.recall_ks):
            raise ConfigError("eval.recall_ks must be a non-empty list of positive integers")
        if self.bleu_max_n < 1 or self.cider_max_n < 1:
            raise ConfigError("eval.bleu_max_n and eval.cider_max_n must be >= 1")
        if self.rouge_beta2 <= 0 or self.cider_sigma <= 0:
            raise ConfigError("eval.rouge_beta2 and eval.cider_sigma must be > 0")
        if self.decode_max_steps < 0:
            raise ConfigError("eval.decode_max_steps must be >= 0")


@dataclass(frozen=True, slots=True)
class RunConfig:
    """Fully resolved experiment configuration."""

    model: ModelConfig = field(default_factory=ModelConfig)
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(stage="adapt", beta2=0.98))
    caption: TrainConfig = field(default_factory=lambda: TrainConfig(stage="caption"))
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    preset: str = "desk"

    def __post_init__(self) -> None:
        if self.adapt.stage != "adapt":
            raise ConfigError("adapt.stage must be 'adapt'")
        if self.caption.stage != "caption":
            raise ConfigError("caption.stage must be 'caption'")
        if self.eval.decode_max_steps > self.model.max_len:
            raise ConfigError(
                f"eval.decode_max_steps ({self.eval.decode_max_steps}) must be <= "
                f"model.max_len ({self.model.max_len})"
            )

    def decode_max_steps(self, model: ModelConfig | None = None) -> int:
        """Decoding cap for ``model`` (defaults to ``self.model``).

        An explicit ``eval.decode_max_steps`` is capped at the model's
        ``max_len``; zero means ``max_len - 2``. Pass the checkpoint's config
        when it may differ from the run config.
        """

        max_len = (model or self.model).max_len
        if self.eval.decode_max_steps:
            return min(self.eval.decode_max_steps, max_len)
        return max_len - 2


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "adapt": TrainConfig,
    "caption": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def _desk_preset() -> RunConfig:
    return RunConfig(
        model=ModelConfig(),
        adapt=TrainConfig(stage="adapt", epochs=12, lr_adapt=1e-3, beta2=0.98),
        caption=TrainConfig(
            stage="caption", epochs=20, lr_vision=1e-3, lr_caption=1e-3, beta2=0.999
        ),
        data=DataConfig(),
        eval=EvalConfig(),
        preset="desk",
    )


def _full_preset() -> RunConfig:
    return RunConfig(
        model=ModelConfig(
            image_size=224,
            patch_size=32,
            d_image=768,
            d_text=512,
            heads=8,
            n_intra=9,
            n_inter=3,
            n_text_layers=12,
            n_caption_encoder=3,
            n_caption_decoder=3,
            dropout=0.1,
            max_len=32,
        ),
        adapt=TrainConfig(stage="adapt", epochs=12, lr_adapt=1e-7, beta2=0.98),
        caption=TrainConfig(
            stage="caption", epochs=50, lr_vision=1e-7, lr_caption=1e-4, beta2=0.999
        ),
        data=DataConfig(),
        eval=EvalConfig(decode_max_steps=32),
        preset="full",
    )


PRESETS = {"desk": _desk_preset, "full": _full_preset}


def flatten_run_config(run_config: RunConfig) -> dict[str, Any]:
    """Return the flat dotted-key view of a run config, keys sorted."""

    flat: dict[str, Any] = {}
    for section in SECTIONS:
        values = dataclasses.asdict(getattr(run_config, section))
        for key, value in values.items():
            flat[f"{section}.{key}"] = list(value) if isinstance(value, tuple) else value
    return dict(sorted(flat.items()))


def _flatten_toml(table: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in table.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten_toml(value, prefix=f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _coerce(key: str, raw: Any, current: Any) -> Any:
    """Coerce an override to the type of the current value."""

    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        return _parse_bool(str(raw), var_name=key)
    if isinstance(current, int):
        if isinstance(raw, bool):
            raise ConfigError(f"{key} must be an integer, got {raw!r}")
        if isinstance(raw, int):
            return raw
        return _parse_int(str(raw), var_name=key)
    if isinstance(current, float):
        if isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        return _parse_float(str(raw), var_name=key)
    if isinstance(current, tuple):
        if isinstance(raw, (list, tuple)):
            return tuple(_coerce(key, item, 0) for item in raw)
        return _parse_int_tuple(str(raw), var_name=key)
    return str(raw)


def parse_override(text: str) -> tuple[str, str]:
    """Split a ``key=value`` override string."""

    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override has an empty key: {text!r}")
    return key, value.strip()


def apply_overrides(run_config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Return a copy of ``run_config`` with dotted-key overrides applied.

    Raises
    ------
    ConfigError
        On unknown keys, uncoercible values, or values that break a section's
        invariants.
    """

    updates: dict[str, dict[str, Any]] = {section: {} for section in SECTIONS}
    for dotted, raw in overrides.items():
        section, _, name = dotted.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key: {dotted!r}")
        current_section = getattr(run_config, section)
        if name not in {f.name for f in dataclasses.fields(current_section)}:
            raise ConfigError(f"unknown config key: {dotted!r}")
        updates[section][name] = _coerce(dotted, raw, getattr(current_section, name))

    replaced = {
        section: dataclasses.replace(getattr(run_config, section), **values)
        for section, values in updates.items()
        if values
    }
    return dataclasses.replace(run_config, **replaced)


def load_run_config(
    *,
    preset: str = "desk",
    config_path: Path | None = None,
    overrides: Iterable[str] | Mapping[str, Any] = (),
    seed: int | None = None,
) -> RunConfig:
    """Resolve a run configuration.

    Precedence, lowest first: preset, TOML config file, overrides, ``seed``.

    Parameters
    ----------
    preset:
        ``"desk"`` or ``"full"``.
    config_path:
        Optional TOML file. Dotted keys and nested tables are both accepted;
        a top-level ``preset`` key selects the base preset when the caller
        did not pass one explicitly.
    overrides:
        ``key=value`` strings or a mapping of dotted keys to values.
    seed:
        When given, sets ``data.seed``, ``adapt.seed`` and ``caption.seed``.

    Returns
    -------
    RunConfig
        Validated configuration.
    """

    file_values: dict[str, Any] = {}
    if config_path is not None:
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            parsed = tomllib.loads(config_path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid TOML: {exc}") from exc
        file_values = _flatten_toml(parsed)
        preset = str(file_values.pop("preset", preset))

    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")

    run_config = PRESETS[preset]()
    run_config = apply_overrides(run_config, file_values)

    if isinstance(overrides, Mapping):
        override_values = dict(overrides)
    else:
        override_values = dict(parse_override(item) for item in overrides)
    run_config = apply_overrides(run_config, override_values)

    if seed is not None:
        run_config = apply_overrides(
            run_config, {"data.seed": seed, "adapt.seed": seed, "caption.seed": seed}
        )

    logger.info(
        "Resolved run config: preset=%s digest=%s", run_config.preset, config_digest(run_config)
    )
    return run_config


def config_digest(run_config: RunConfig) -> str:
    """Return a stable sha256 digest of the flat config."""

    payload = json.dumps(
        {"preset": run_config.preset, **flatten_run_config(run_config)}, sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def write_resolved_config(run_config: RunConfig, out_dir: Path) -> Path:
    """Write ``resolved_config.json`` into ``out_dir`` for provenance."""

    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    document = {
        "preset": run_config.preset,
        "digest": config_digest(run_config),
        "values": flatten_run_config(run_config),
    }
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
