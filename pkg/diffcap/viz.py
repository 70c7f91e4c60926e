"""Visualization helpers.

Small, testable helpers that turn training and attention artifacts into
Altair charts. Row builders return JSON-serializable dictionaries (plain
``int``/``float``/``str``), since Altair inlines data as JSON and numpy
scalars do not serialize on that path.

Charts are saved as standalone HTML, which needs no rendering backend.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Mapping, Sequence

import altair as alt
import numpy as np

from diffcap.training import LossRecord

logger = logging.getLogger(__name__)


IMAGE_LABELS = ("before", "after")


def build_loss_chart_rows(records: Sequence[LossRecord]) -> list[dict[str, Any]]:
    """Rows for the loss curve, sorted by stage (adapt first) then step.

    Extra loss components (``i2t``, ``t2i``, ``val_xe``, ...) become their own
    series next to the total ``loss``; counters such as ``clipped_steps`` and
    the temperature are left out.
    """

    stage_order = {"adapt": 0, "caption": 1}
    ordered = sorted(records, key=lambda record: (stage_order.get(record.stage, 2), record.step))

    rows: list[dict[str, Any]] = []
    for record in ordered:
        rows.append(
            {
                "stage": record.stage,
                "epoch": int(record.epoch),
                "step": int(record.step),
                "series": "loss",
                "value": float(record.loss),
            }
        )
        for name, value in sorted(record.components.items()):
            if name in {"clipped_steps", "tau"}:
                continue
            rows.append(
                {
                    "stage": record.stage,
                    "epoch": int(record.epoch),
                    "step": int(record.step),
                    "series": name,
                    "value": float(value),
                }
            )
    return rows


def build_loss_curve_chart(chart_rows: Sequence[Mapping[str, Any]]) -> alt.FacetChart:
    """One loss panel per stage, one line per series, independent y scales."""

    base = (
        alt.Chart(alt.Data(values=list(chart_rows)))
        .mark_line(point=True)
        .encode(
            x=alt.X("step:Q", title="Optimizer step"),
            y=alt.Y("value:Q", title="Value"),
            color=alt.Color("series:N", title="Series"),
            order=alt.Order("step:Q"),
            tooltip=[
                alt.Tooltip("stage:N"),
                alt.Tooltip("epoch:Q"),
                alt.Tooltip("step:Q"),
                alt.Tooltip("series:N"),
                alt.Tooltip("value:Q", format=".5f"),
            ],
        )
        .properties(width=360, height=220)
    )
    return base.facet(column=alt.Column("stage:N", title=None)).resolve_scale(y="independent")


def build_heatmap_rows(
    heatmaps: Mapping[str, Sequence[tuple[np.ndarray, np.ndarray]]],
) -> list[dict[str, Any]]:
    """Rows for the attention heatmaps.

    Parameters
    ----------
    heatmaps:
        ``{"intra": [...], "inter": [...]}`` with one ``(before, after)`` pair
        of ``grid x grid`` maps per layer (see ``model.attention_heatmaps``).

    Returns
    -------
    list[dict[str, Any]]
        One row per stage, layer, image and patch, with a ``panel`` label
        such as ``"inter L0"``.
    """

    rows: list[dict[str, Any]] = []
    for stage in ("intra", "inter"):
        for layer, maps in enumerate(heatmaps.get(stage, ())):
            for image, grid in zip(IMAGE_LABELS, maps, strict=True):
                grid = np.asarray(grid, dtype=np.float64)
                for (row, col), weight in np.ndenumerate(grid):
                    rows.append(
                        {
                            "stage": stage,
                            "layer": layer,
                            "panel": f"{stage} L{layer}",
                            "image": image,
                            "row": int(row),
                            "col": int(col),
                            "weight": float(weight),
                        }
                    )
    return rows


def build_attention_heatmap_chart(chart_rows: Sequence[Mapping[str, Any]]) -> alt.FacetChart:
    """Grid of heatmaps: one row of panels per stage/layer, one column per image."""

    if not chart_rows:
        raise ValueError("no heatmap rows to chart")

    base = (
        alt.Chart(alt.Data(values=list(chart_rows)))
        .mark_rect()
        .encode(
            x=alt.X("col:O", title=None, axis=None),
            y=alt.Y("row:O", title=None, axis=None),
            color=alt.Color("weight:Q", scale=alt.Scale(scheme="viridis"), title="Attention"),
            tooltip=[
                alt.Tooltip("panel:N"),
                alt.Tooltip("image:N"),
                alt.Tooltip("row:O"),
                alt.Tooltip("col:O"),
                alt.Tooltip("weight:Q", format=".4f"),
            ],
        )
        .properties(width=140, height=140)
    )
    return base.facet(
        row=alt.Row("panel:N", title=None),
        column=alt.Column("image:N", title=None, sort=list(IMAGE_LABELS)),
    )


def save_chart(chart: alt.TopLevelMixin, path: Path) -> Path:
    """Write ``chart`` as a standalone HTML page."""

    path.parent.mkdir(parents=True, exist_ok=True)
    chart.save(str(path), format="html")
    logger.info("Wrote chart to %s", path)
    return path
