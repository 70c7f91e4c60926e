"""Mini-Change: a deterministic synthetic image-difference dataset.

Each scene is 2-6 non-overlapping flat shapes on a plain gray background.
A pair is a scene ("before") and a copy with exactly one edit ("after"):

- ``color``: one object gets a new color
- ``texture``: one object flips between solid and striped fill
- ``move``: one object moves to a free grid cell
- ``add``: a new object appears in a free grid cell
- ``drop``: one object disappears
- ``distractor``: nothing changes semantically; every pixel is shifted by the
  same small integer brightness offset (at most 5 of 255 levels, about 2%)

Captions come from fixed templates parameterized by object attributes; every
pair gets one or two paraphrases.

Design goals
------------
- Deterministic: each record's RNG is derived from (seed, split, index,
  image_size), so output is byte-identical across runs and independent of
  generation order.
- Pure scene construction and rendering; I/O only in ``generate_minichange``.
- Object identity is unambiguous: no two objects in a scene share
  (color, shape), so "the red circle" always names one object.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from diffcap.errors import ConfigError, DataError
from diffcap.manifest import (
    CHANGE_TYPES,
    DatasetManifest,
    PairRecord,
    derive_seed,
    save_image,
    write_manifest,
)
from diffcap.text import describes_no_change, tokenize

logger = logging.getLogger(__name__)


# Every channel stays inside [10, 245] (stripes at half intensity included)
# so a +-5 brightness offset never clips.
COLORS: dict[str, tuple[int, int, int]] = {
    "red": (200, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 210),
    "yellow": (225, 200, 40),
    "purple": (140, 60, 180),
    "cyan": (40, 190, 200),
    "brown": (140, 90, 40),
}
BACKGROUND = (128, 128, 128)
SHAPES = ("square", "circle", "triangle")
TEXTURES = ("solid", "striped")
GRID_CELLS = 4
MIN_OBJECTS, MAX_OBJECTS = 2, 6
MAX_BRIGHTNESS_OFFSET = 5

TEMPLATES: dict[str, tuple[str, ...]] = {
    "color": (
        "the {color} {shape} became {new_color}",
        "the {color} {shape} changed to {new_color}",
        "the {color} {shape} turned {new_color}",
    ),
    "texture": (
        "the {color} {shape} became {new_texture}",
        "the {color} {shape} changed to {new_texture}",
        "the {texture} {color} {shape} is now {new_texture}",
    ),
    "move": (
        "the {color} {shape} moved",
        "the {color} {shape} changed its location",
        "the {color} {shape} was moved",
    ),
    "add": (
        "a {color} {shape} has been added",
        "someone added a {color} {shape}",
        "a new {color} {shape} appeared",
    ),
    "drop": (
        "the {color} {shape} has disappeared",
        "the {color} {shape} is missing",
        "someone removed the {color} {shape}",
    ),
    "distractor": (
        "there is no change",
        "there is no difference",
        "the two scenes are the same",
    ),
}

_KEYWORDS: tuple[tuple[str, frozenset[str]], ...] = (
    ("add", frozenset({"added", "appeared", "new"})),
    ("drop", frozenset({"disappeared", "missing", "removed"})),
    ("move", frozenset({"moved", "location"})),
)


@dataclass(frozen=True, slots=True)
class SceneObject:
    """One shape placed in a grid cell.

    ``offset`` is the pixel offset of the shape's bounding box inside its
    cell.
    """

    color: str
    shape: str
    texture: str
    cell: tuple[int, int]
    offset: tuple[int, int]


@dataclass(frozen=True, slots=True)
class MiniChangePair:
    """A rendered pair plus the ground truth needed to audit it."""

    before: np.ndarray
    after: np.ndarray
    captions: tuple[str, ...]
    change_type: str
    edited_boxes: tuple[tuple[int, int, int, int], ...]
    brightness_offset: int


def _cell_size(image_size: int) -> int:
    return image_size // GRID_CELLS


def _object_size(image_size: int) -> int:
    return max(3, (_cell_size(image_size) * 3) // 4)


def object_box(obj: SceneObject, image_size: int) -> tuple[int, int, int, int]:
    """Return ``(x0, y0, x1, y1)`` with exclusive upper bounds."""

    cell = _cell_size(image_size)
    size = _object_size(image_size)
    row, col = obj.cell
    x0 = col * cell + obj.offset[0]
    y0 = row * cell + obj.offset[1]
    return (x0, y0, x0 + size, y0 + size)


def _object_mask(obj: SceneObject, image_size: int) -> np.ndarray:
    x0, y0, x1, y1 = object_box(obj, image_size)
    canvas = Image.new("L", (image_size, image_size), 0)
    draw = ImageDraw.Draw(canvas)
    if obj.shape == "square":
        draw.rectangle((x0, y0, x1 - 1, y1 - 1), fill=255)
    elif obj.shape == "circle":
        draw.ellipse((x0, y0, x1 - 1, y1 - 1), fill=255)
    elif obj.shape == "triangle":
        draw.polygon(((x0 + x1 - 1) / 2, y0, x1 - 1, y1 - 1, x0, y1 - 1), fill=255)
    else:
        raise ValueError(f"unknown shape {obj.shape!r}")
    return np.asarray(canvas) > 0


def render_scene(objects: tuple[SceneObject, ...], image_size: int) -> np.ndarray:
    """Rasterize ``objects`` into an ``H x W x 3`` uint8 image."""

    image = np.empty((image_size, image_size, 3), dtype=np.uint8)
    image[...] = BACKGROUND
    stripe = max(1, _object_size(image_size) // 6)
    rows = np.arange(image_size)[:, None]

    for obj in objects:
        mask = _object_mask(obj, image_size)
        color = np.array(COLORS[obj.color], dtype=np.uint8)
        if obj.texture == "striped":
            _, y0, _, _ = object_box(obj, image_size)
            dark_rows = ((rows - y0) // stripe) % 2 == 1
            image[mask & ~dark_rows] = color
            image[mask & dark_rows] = color // 2
        else:
            image[mask] = color
    return image


def _random_object(
    rng: random.Random,
    *,
    image_size: int,
    cell: tuple[int, int],
    taken: set[tuple[str, str]],
) -> SceneObject:
    choices = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in taken]
    color, shape = rng.choice(choices)
    slack = _cell_size(image_size) - _object_size(image_size)
    return SceneObject(
        color=color,
        shape=shape,
        texture=rng.choice(TEXTURES),
        cell=cell,
        offset=(rng.randint(0, slack), rng.randint(0, slack)),
    )


def _random_scene(rng: random.Random, image_size: int) -> tuple[SceneObject, ...]:
    cells = [(row, col) for row in range(GRID_CELLS) for col in range(GRID_CELLS)]
    count = rng.randint(MIN_OBJECTS, MAX_OBJECTS)
    objects: list[SceneObject] = []
    taken: set[tuple[str, str]] = set()
    for cell in rng.sample(cells, count):
        obj = _random_object(rng, image_size=image_size, cell=cell, taken=taken)
        taken.add((obj.color, obj.shape))
        objects.append(obj)
    return tuple(objects)


def _free_cells(objects: tuple[SceneObject, ...]) -> list[tuple[int, int]]:
    used = {obj.cell for obj in objects}
    return [
        (row, col)
        for row in range(GRID_CELLS)
        for col in range(GRID_CELLS)
        if (row, col) not in used
    ]


def _captions(rng: random.Random, change_type: str, **attributes: str) -> tuple[str, ...]:
    templates = TEMPLATES[change_type]
    count = rng.choice((1, 2))
    return tuple(template.format(**attributes) for template in rng.sample(templates, count))


def render_pair(*, seed: int, split: str, index: int, image_size: int) -> MiniChangePair:
    """Build one Mini-Change pair; the change type is ``CHANGE_TYPES[index % 6]``."""

    rng = random.Random(derive_seed("minichange", seed, split, index, image_size))
    change_type = CHANGE_TYPES[index % len(CHANGE_TYPES)]
    scene = _random_scene(rng, image_size)
    before = render_scene(scene, image_size)

    target_index = rng.randrange(len(scene))
    target = scene[target_index]
    described = {"color": target.color, "shape": target.shape, "texture": target.texture}
    taken = {(obj.color, obj.shape) for obj in scene}
    edited: SceneObject | None = None
    after_scene = scene
    offset = 0

    if change_type == "color":
        options = [c for c in COLORS if c != target.color and (c, target.shape) not in taken]
        edited = replace(target, color=rng.choice(options))
        after_scene = scene[:target_index] + (edited,) + scene[target_index + 1 :]
        captions = _captions(rng, change_type, new_color=edited.color, **described)
    elif change_type == "texture":
        new_texture = "striped" if target.texture == "solid" else "solid"
        edited = replace(target, texture=new_texture)
        after_scene = scene[:target_index] + (edited,) + scene[target_index + 1 :]
        captions = _captions(rng, change_type, new_texture=new_texture, **described)
    elif change_type == "move":
        edited = replace(target, cell=rng.choice(_free_cells(scene)))
        after_scene = scene[:target_index] + (edited,) + scene[target_index + 1 :]
        captions = _captions(rng, change_type, **described)
    elif change_type == "add":
        cell = rng.choice(_free_cells(scene))
        edited = _random_object(rng, image_size=image_size, cell=cell, taken=taken)
        target = edited
        after_scene = scene + (edited,)
        captions = _captions(
            rng, change_type, color=edited.color, shape=edited.shape, texture=edited.texture
        )
    elif change_type == "drop":
        after_scene = scene[:target_index] + scene[target_index + 1 :]
        captions = _captions(rng, change_type, **described)
    else:
        offset = rng.choice(
            [d for d in range(-MAX_BRIGHTNESS_OFFSET, MAX_BRIGHTNESS_OFFSET + 1) if d != 0]
        )
        captions = _captions(rng, change_type)

    if change_type == "distractor":
        after = (before.astype(np.int16) + offset).astype(np.uint8)
        boxes: tuple[tuple[int, int, int, int], ...] = ()
    else:
        after = render_scene(after_scene, image_size)
        boxes_list = [object_box(target, image_size)]
        if edited is not None and edited is not target:
            boxes_list.append(object_box(edited, image_size))
        boxes = tuple(dict.fromkeys(boxes_list))

    return MiniChangePair(
        before=before,
        after=after,
        captions=captions,
        change_type=change_type,
        edited_boxes=boxes,
        brightness_offset=offset,
    )


def infer_change_type(caption: str) -> str | None:
    """Map a caption to a change type using the template keywords.

    Returns ``None`` when no keyword matches.
    """

    tokens = tokenize(caption)
    if not tokens:
        return None
    if describes_no_change(caption):
        return "distractor"
    token_set = set(tokens)
    for change_type, keywords in _KEYWORDS:
        if token_set & keywords:
            return change_type
    if tokens[-1] in TEXTURES:
        return "texture"
    if tokens[-1] in COLORS:
        return "color"
    return None


def difference_mask(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """Return the ``H x W`` boolean mask of pixels that differ in any channel."""

    if before.shape != after.shape:
        raise ValueError(f"shape mismatch: {before.shape} vs {after.shape}")
    return np.any(before != after, axis=-1)


def patch_change_mask(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Reduce a pixel mask to a flat per-patch mask (row-major patch order)."""

    height, width = mask.shape
    if height % patch_size or width % patch_size:
        raise ValueError(f"mask {mask.shape} not divisible by patch_size {patch_size}")
    grid = mask.reshape(height // patch_size, patch_size, width // patch_size, patch_size)
    return grid.any(axis=(1, 3)).reshape(-1)


def _record_id(split: str, index: int) -> str:
    return f"mc-{split}-{index:05d}"


def _write_pair(
    out_dir: Path, *, seed: int, split: str, index: int, image_size: int
) -> PairRecord:
    pair = render_pair(seed=seed, split=split, index=index, image_size=image_size)
    record_id = _record_id(split, index)
    before_rel = f"images/{record_id}_before.png"
    after_rel = f"images/{record_id}_after.png"
    save_image(pair.before, out_dir / before_rel)
    save_image(pair.after, out_dir / after_rel)
    return PairRecord(
        id=record_id,
        before=before_rel,
        after=after_rel,
        captions=pair.captions,
        change_type=pair.change_type,
        split=split,
    )


def generate_minichange(
    seed: int,
    n_pairs: int,
    image_size: int,
    out_dir: Path,
    *,
    patch_size: int = 16,
    n_val: int = 0,
    n_test: int = 0,
    workers: int = 1,
) -> DatasetManifest:
    """Generate Mini-Change images and ``manifest.jsonl`` under ``out_dir``.

    Parameters
    ----------
    seed:
        Base seed.
    n_pairs:
        Number of train pairs (>= 6).
    image_size:
        Square image side; must be divisible by ``patch_size``.
    out_dir:
        Output directory; created if missing.
    patch_size:
        Patch size of the model that will consume the images.
    n_val, n_test:
        Number of validation/test pairs.
    workers:
        Threads used to render and encode images. Output does not depend on it.

    Returns
    -------
    DatasetManifest
        The written manifest. Change types are balanced per split: counts
        differ by at most one.

    Raises
    ------
    ConfigError
        On invalid counts or image size.
    DataError
        If ``out_dir`` cannot be written.
    """

    if n_pairs < len(CHANGE_TYPES):
        raise ConfigError(f"n_pairs must be >= {len(CHANGE_TYPES)}, got {n_pairs}")
    if n_val < 0 or n_test < 0:
        raise ConfigError("n_val and n_test must be >= 0")
    if patch_size <= 0 or image_size < 4 * GRID_CELLS or image_size % patch_size != 0:
        raise ConfigError(
            f"invalid image_size {image_size}: must be >= {4 * GRID_CELLS} and "
            f"divisible by patch_size {patch_size}"
        )
    if workers < 1:
        raise ConfigError("workers must be >= 1")

    jobs = [
        (split, index)
        for split, count in (("train", n_pairs), ("val", n_val), ("test", n_test))
        for index in range(count)
    ]

    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(
                pool.map(
                    lambda job: _write_pair(
                        out_dir, seed=seed, split=job[0], index=job[1], image_size=image_size
                    ),
                    jobs,
                )
            )
        manifest = DatasetManifest(records=tuple(records), root=out_dir)
        write_manifest(manifest, out_dir / "manifest.jsonl")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out_dir}: {exc}") from exc

    logger.info(
        "Generated Mini-Change: seed=%s train=%s val=%s test=%s image_size=%s -> %s",
        seed,
        n_pairs,
        n_val,
        n_test,
        image_size,
        out_dir,
    )
    return manifest
