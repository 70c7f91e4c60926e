"""Dataset manifest types, validation, and line-delimited I/O.

A manifest is a JSONL file, one record per line::

    {"id": ..., "before": ..., "after": ..., "captions": [...],
     "change_type": ..., "split": ...}

Image paths are relative to the manifest file. This layout matches the
Mini-Change generator output, and external image-pair datasets
(single-sentence mode) can be converted to it.

This module keeps responsibilities narrow, like a persistence layer:
- Validate/normalize records so they match the manifest invariants.
- Read and write manifests.
- Load images as float arrays in [0, 1].
- Iterate deterministic, shuffled batches.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from diffcap.errors import DataError, ManifestError
from diffcap.text import describes_no_change, tokenize

logger = logging.getLogger(__name__)


CHANGE_TYPES = ("color", "texture", "move", "add", "drop", "distractor")
SPLITS = ("train", "val", "test")
MANIFEST_FIELDS = ("id", "before", "after", "captions", "change_type", "split")


@dataclass(frozen=True, slots=True)
class PairRecord:
    """Manifest entry referencing one image pair on disk.

    Parameters
    ----------
    id:
        Unique record identifier.
    before, after:
        Image paths, relative to the manifest directory.
    captions:
        Reference captions (at least one, each non-empty after tokenization).
    change_type:
        One of ``CHANGE_TYPES``.
    split:
        One of ``SPLITS``.
    """

    id: str
    before: str
    after: str
    captions: tuple[str, ...]
    change_type: str
    split: str


@dataclass(frozen=True, slots=True)
class ImagePairSample:
    """A loaded image pair: two ``H x W x 3`` float32 arrays in [0, 1]."""

    id: str
    before: np.ndarray
    after: np.ndarray
    captions: tuple[str, ...]
    change_type: str
    split: str


@dataclass(frozen=True, slots=True)
class CaptionedPair:
    """One batch element: a sample plus the caption chosen for this epoch."""

    sample: ImagePairSample
    caption: str


def validate_record(record: PairRecord) -> PairRecord:
    """Validate a record against the manifest invariants.

    Raises
    ------
    ManifestError
        If any field is missing or invalid.
    """

    if not record.id:
        raise ManifestError("id must be a non-empty string")
    if not record.before or not record.after:
        raise ManifestError(f"record {record.id!r}: before/after paths must be non-empty")
    if not record.captions:
        raise ManifestError(f"record {record.id!r}: captions must be non-empty")
    for caption in record.captions:
        if not tokenize(caption):
            raise ManifestError(f"record {record.id!r}: caption {caption!r} has no tokens")
    if record.change_type not in CHANGE_TYPES:
        raise ManifestError(
            f"record {record.id!r}: unknown change_type {record.change_type!r}"
        )
    if record.change_type == "distractor":
        for caption in record.captions:
            if not describes_no_change(caption):
                raise ManifestError(
                    f"record {record.id!r}: distractor caption {caption!r} must describe no change"
                )
    if record.split not in SPLITS:
        raise ManifestError(f"record {record.id!r}: unknown split {record.split!r}")
    return record


@dataclass(frozen=True, slots=True)
class DatasetManifest:
    """Validated collection of pair records.

    Parameters
    ----------
    records:
        Records in file order.
    root:
        Directory that image paths are relative to.
    """

    records: tuple[PairRecord, ...]
    root: Path

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for record in self.records:
            if record.id in seen:
                raise ManifestError(f"duplicate id {record.id!r}")
            seen.add(record.id)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def splits(self) -> dict[str, tuple[str, ...]]:
        """Disjoint partition of record ids by split."""

        return {
            split: tuple(record.id for record in self.records if record.split == split)
            for split in SPLITS
        }

    def split(self, name: str) -> tuple[PairRecord, ...]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return tuple(record for record in self.records if record.split == name)

    def captions(self, split: str | None = None) -> list[str]:
        records = self.records if split is None else self.split(split)
        return [caption for record in records for caption in record.captions]

    def resolve(self, relative: str) -> Path:
        return self.root / relative


def _parse_record(raw: object, *, line_number: int) -> PairRecord:
    if not isinstance(raw, dict):
        raise ManifestError("record must be a JSON object", line_number=line_number)
    missing = [name for name in MANIFEST_FIELDS if name not in raw]
    if missing:
        raise ManifestError(f"missing fields {missing}", line_number=line_number)
    captions = raw["captions"]
    if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
        raise ManifestError("captions must be a list of strings", line_number=line_number)
    for name in ("id", "before", "after", "change_type", "split"):
        if not isinstance(raw[name], str):
            raise ManifestError(f"{name} must be a string", line_number=line_number)

    record = PairRecord(
        id=raw["id"],
        before=raw["before"],
        after=raw["after"],
        captions=tuple(captions),
        change_type=raw["change_type"],
        split=raw["split"],
    )
    try:
        return validate_record(record)
    except ManifestError as exc:
        raise ManifestError(str(exc), line_number=line_number) from exc


def record_to_json(record: PairRecord) -> str:
    """Serialize a record with a fixed key order (byte-stable output)."""

    return json.dumps(
        {
            "id": record.id,
            "before": record.before,
            "after": record.after,
            "captions": list(record.captions),
            "change_type": record.change_type,
            "split": record.split,
        },
        ensure_ascii=True,
    )


def write_manifest(manifest: DatasetManifest, path: Path) -> Path:
    """Write ``manifest`` as JSONL to ``path``."""

    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [record_to_json(record) for record in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Wrote manifest with %s records to %s", len(manifest), path)
    return path


def _image_size(path: Path) -> tuple[int, int]:
    # Header only; pixels are decoded lazily by load_image.
    try:
        with Image.open(path) as image:
            return image.size
    except OSError as exc:
        raise ManifestError(f"unreadable image {path}: {exc}") from exc


def load_manifest(path: Path, *, check_images: bool = True) -> DatasetManifest:
    """Load and validate a JSONL manifest.

    Parameters
    ----------
    path:
        Manifest file.
    check_images:
        Verify that every referenced image exists and that both images of a
        pair have the same size.

    Raises
    ------
    FileNotFoundError
        If the manifest itself is missing.
    ManifestError
        On parse errors (with line number), duplicate ids, missing images, or
        pairs whose images differ in size.
    """

    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")

    records: list[PairRecord] = []
    seen_lines: dict[str, int] = {}
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON: {exc.msg}", line_number=line_number) from exc
        record = _parse_record(raw, line_number=line_number)
        if record.id in seen_lines:
            raise ManifestError(
                f"duplicate id {record.id!r} (first seen on line {seen_lines[record.id]})",
                line_number=line_number,
            )
        seen_lines[record.id] = line_number
        records.append(record)

    manifest = DatasetManifest(records=tuple(records), root=path.parent)

    if check_images:
        for record in manifest.records:
            for relative in (record.before, record.after):
                if not manifest.resolve(relative).is_file():
                    raise ManifestError(
                        f"record {record.id!r}: image not found: {relative}",
                        line_number=seen_lines[record.id],
                    )
            before_size = _image_size(manifest.resolve(record.before))
            after_size = _image_size(manifest.resolve(record.after))
            if before_size != after_size:
                raise ManifestError(
                    f"record {record.id!r}: before {before_size} and after {after_size} differ in size",
                    line_number=seen_lines[record.id],
                )

    logger.info("Loaded manifest %s: %s records", path, len(manifest))
    return manifest


def save_image(array: np.ndarray, path: Path) -> None:
    """Write an ``H x W x 3`` uint8 array as a PNG."""

    if array.dtype != np.uint8 or array.ndim != 3 or array.shape[2] != 3:
        raise DataError(f"expected H x W x 3 uint8 image, got {array.dtype} {array.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array, mode="RGB").save(path, format="PNG")


@lru_cache(maxsize=4096)
def _read_image_cached(path: str) -> np.ndarray:
    with Image.open(path) as image:
        array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
    array.setflags(write=False)
    return array


def load_image(path: Path) -> np.ndarray:
    """Load an 8-bit RGB image as a read-only float32 array in [0, 1]."""

    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    return _read_image_cached(str(path.resolve()))


def load_sample(manifest: DatasetManifest, record: PairRecord) -> ImagePairSample:
    """Load both images of ``record``.

    Raises
    ------
    DataError
        If the two images differ in shape.
    """

    before = load_image(manifest.resolve(record.before))
    after = load_image(manifest.resolve(record.after))
    if before.shape != after.shape:
        raise DataError(
            f"record {record.id!r}: before {before.shape} and after {after.shape} differ"
        )
    return ImagePairSample(
        id=record.id,
        before=before,
        after=after,
        captions=record.captions,
        change_type=record.change_type,
        split=record.split,
    )


def derive_seed(*parts: object) -> int:
    """Derive a 64-bit seed from arbitrary parts via sha256.

    Python's built-in ``hash()`` is randomized between processes, so a stable
    digest is used instead.
    """

    text = "|".join(str(part) for part in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], byteorder="big", signed=False)


def batch_iter(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    seed: int,
    *,
    epoch: int = 0,
    drop_last: bool = False,
    shuffle: bool = True,
) -> Iterator[list[CaptionedPair]]:
    """Yield batches of one epoch over ``split``.

    The shuffle order and the caption chosen for each record both come from an
    RNG derived from ``(seed, epoch)``, so the same seed and epoch always give
    the same batches.

    Raises
    ------
    ValueError
        If ``batch_size < 1``.
    DataError
        If the split is empty.
    """

    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")

    records: Sequence[PairRecord] = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")

    rng = np.random.default_rng(derive_seed("batch_iter", seed, epoch))
    order = rng.permutation(len(records)) if shuffle else np.arange(len(records))
    caption_choice = [int(rng.integers(len(record.captions))) for record in records]

    for start in range(0, len(order), batch_size):
        indices = order[start : start + batch_size]
        if drop_last and len(indices) < batch_size:
            break
        yield [
            CaptionedPair(
                sample=load_sample(manifest, records[index]),
                caption=records[index].captions[caption_choice[index]],
            )
            for index in indices
        ]
