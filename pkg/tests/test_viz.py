from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from diffcap.training import LossRecord
from diffcap.viz import (
    build_attention_heatmap_chart,
    build_heatmap_rows,
    build_loss_chart_rows,
    build_loss_curve_chart,
    save_chart,
)


def _inline_values(spec: dict) -> list:
    # Faceted charts keep inline data at the top level.
    values = None
    if isinstance(spec.get("data"), dict):
        values = spec["data"].get("values")
    if values is None and isinstance(spec.get("spec", {}).get("data"), dict):
        values = spec["spec"]["data"].get("values")
    assert isinstance(values, list)
    return values


def test_build_loss_chart_rows_sorts_stages_and_skips_counters() -> None:
    records = [
        LossRecord(stage="caption", epoch=0, step=2, loss=3.0, components={"clipped_steps": 1.0, "val_xe": 2.5}),
        LossRecord(stage="adapt", epoch=1, step=4, loss=1.5, components={"i2t": 0.7, "t2i": 0.8, "tau": 0.07}),
        LossRecord(stage="adapt", epoch=0, step=2, loss=2.0, components={}),
    ]

    rows = build_loss_chart_rows(records)

    assert [(row["stage"], row["step"]) for row in rows][:2] == [("adapt", 2), ("adapt", 4)]
    assert rows[-1]["stage"] == "caption"
    series = {row["series"] for row in rows}
    assert series == {"loss", "i2t", "t2i", "val_xe"}
    assert all(type(row["value"]) is float for row in rows)


def test_build_loss_curve_chart_serializes_inline_data() -> None:
    rows = build_loss_chart_rows(
        [LossRecord(stage="adapt", epoch=0, step=1, loss=np.float32(2.0), components={"i2t": np.float64(1.0)})]
    )

    spec = build_loss_curve_chart(rows).to_dict()

    assert "facet" in spec
    values = _inline_values(spec)
    assert values[0] == rows[0]
    json.dumps(spec)


def test_build_heatmap_rows_labels_panels() -> None:
    grid = np.arange(4, dtype=np.float32).reshape(2, 2)
    heatmaps = {"intra": [(grid, grid)], "inter": [(grid, grid + 1), (grid, grid)]}

    rows = build_heatmap_rows(heatmaps)

    assert len(rows) == 3 * 2 * 4
    assert {row["panel"] for row in rows} == {"intra L0", "inter L0", "inter L1"}
    after_inter = [r for r in rows if r["panel"] == "inter L0" and r["image"] == "after"]
    assert [(r["row"], r["col"], r["weight"]) for r in after_inter][-1] == (1, 1, 4.0)
    assert all(type(row["weight"]) is float and type(row["row"]) is int for row in rows)


def test_build_attention_heatmap_chart_rejects_empty_rows() -> None:
    with pytest.raises(ValueError, match="no heatmap rows"):
        build_attention_heatmap_chart([])


def test_save_chart_writes_standalone_html(tmp_path: Path) -> None:
    grid = np.full((2, 2), 0.25)
    chart = build_attention_heatmap_chart(build_heatmap_rows({"inter": [(grid, grid)]}))

    path = save_chart(chart, tmp_path / "charts" / "attention.html")

    html = path.read_text(encoding="utf-8")
    assert "<html" in html.lower()
    assert "inter L0" in html
