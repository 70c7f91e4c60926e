"""DuckDB run store.

Every training loss record and every sweep/ablation row is also appended to a
DuckDB file (``<out>/runs.duckdb``) so results from many runs can be queried
together. The line-delimited loss log and the JSON reports stay the primary
artifacts; this store is the index across runs.

This module keeps responsibilities narrow:
- Validate/normalize rows before persistence.
- Create/ensure the ``loss_log``, ``sweep_results`` and ``ablation_results``
  tables.
- Append, fetch, export and reset.

Functions take an explicit ``db_path`` and hold no module-level state.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import duckdb

from diffcap.config import STAGES
from diffcap.errors import DataError
from diffcap.training import LossRecord

logger = logging.getLogger(__name__)


LOSS_TABLE = "loss_log"
SWEEP_TABLE = "sweep_results"
ABLATION_TABLE = "ablation_results"
TABLES = (LOSS_TABLE, SWEEP_TABLE, ABLATION_TABLE)

ABLATION_ARMS = ("direct-ft", "no-adapt", "adapt")

_SCHEMAS = {
    LOSS_TABLE: """
        run_id VARCHAR,
        stage VARCHAR,
        epoch INTEGER,
        step INTEGER,
        loss DOUBLE,
        components VARCHAR
    """,
    SWEEP_TABLE: """
        run_id VARCHAR,
        seed BIGINT,
        n_intra INTEGER,
        n_inter INTEGER,
        pair_to_text_r1 DOUBLE,
        pair_to_text_r5 DOUBLE,
        pair_to_text_r10 DOUBLE,
        pair_to_text_mdr DOUBLE,
        pair_to_text_mnr DOUBLE,
        text_to_pair_r1 DOUBLE,
        text_to_pair_r5 DOUBLE,
        text_to_pair_r10 DOUBLE,
        text_to_pair_mdr DOUBLE,
        text_to_pair_mnr DOUBLE,
        bleu4 DOUBLE,
        rouge_l DOUBLE,
        cider_d DOUBLE
    """,
    ABLATION_TABLE: """
        run_id VARCHAR,
        seed BIGINT,
        arm VARCHAR,
        bleu4 DOUBLE,
        rouge_l DOUBLE,
        cider_d DOUBLE
    """,
}


@dataclass(frozen=True, slots=True)
class SweepRow:
    """One (N_intra, N_inter) split of a layer-allocation sweep.

    Retrieval fields follow ``<direction>_<metric>``.
    """

    run_id: str
    seed: int
    n_intra: int
    n_inter: int
    pair_to_text_r1: float
    pair_to_text_r5: float
    pair_to_text_r10: float
    pair_to_text_mdr: float
    pair_to_text_mnr: float
    text_to_pair_r1: float
    text_to_pair_r5: float
    text_to_pair_r10: float
    text_to_pair_mdr: float
    text_to_pair_mnr: float
    bleu4: float
    rouge_l: float
    cider_d: float


@dataclass(frozen=True, slots=True)
class AblationRow:
    run_id: str
    seed: int
    arm: str
    bleu4: float
    rouge_l: float
    cider_d: float


SWEEP_COLUMNS = tuple(f.name for f in fields(SweepRow))
ABLATION_COLUMNS = tuple(f.name for f in fields(AblationRow))


def _require_path(db_path: Path) -> None:
    if not isinstance(db_path, Path):
        raise TypeError("db_path must be a pathlib.Path")


def _require_finite(value: float, *, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise DataError(f"{name} must be finite, got {value}")
    return value


def normalize_loss_record(record: LossRecord) -> LossRecord:
    """Validate a loss record.

    Raises
    ------
    DataError
        If the stage is unknown, the counters are negative, or any value is
        non-finite.
    """

    if record.stage not in STAGES:
        raise DataError(f"unknown stage {record.stage!r}")
    if record.epoch < 0 or record.step < 0:
        raise DataError("epoch and step must be >= 0")
    return LossRecord(
        stage=record.stage,
        epoch=int(record.epoch),
        step=int(record.step),
        loss=_require_finite(record.loss, name="loss"),
        components={
            key: _require_finite(value, name=f"components.{key}")
            for key, value in sorted(record.components.items())
        },
    )


def normalize_sweep_row(row: SweepRow) -> SweepRow:
    if not row.run_id:
        raise DataError("run_id must be a non-empty string")
    if row.n_intra < 1 or row.n_inter < 0:
        raise DataError(f"invalid split {row.n_intra}:{row.n_inter}")
    for name in SWEEP_COLUMNS[4:]:
        _require_finite(getattr(row, name), name=name)
    return row


def normalize_ablation_row(row: AblationRow) -> AblationRow:
    if not row.run_id:
        raise DataError("run_id must be a non-empty string")
    if row.arm not in ABLATION_ARMS:
        raise DataError(f"unknown ablation arm {row.arm!r}; expected one of {ABLATION_ARMS}")
    for name in ("bleu4", "rouge_l", "cider_d"):
        _require_finite(getattr(row, name), name=name)
    return row


def _ensure_table(connection: duckdb.DuckDBPyConnection, table: str) -> None:
    connection.execute(f"CREATE TABLE IF NOT EXISTS {table} ({_SCHEMAS[table]})")


def _table_exists(connection: duckdb.DuckDBPyConnection, table_name: str) -> bool:
    result = connection.execute(
        """
        SELECT 1
        FROM information_schema.tables
        WHERE table_schema = 'main'
          AND table_name = ?
        LIMIT 1
        """.strip(),
        [table_name],
    ).fetchone()
    return result is not None


def _insert(db_path: Path, table: str, columns: Sequence[str], rows: list[tuple]) -> int:
    db_path.parent.mkdir(parents=True, exist_ok=True)
    placeholders = ", ".join("?" for _ in columns)
    with duckdb.connect(str(db_path)) as connection:
        _ensure_table(connection, table)
        connection.executemany(
            f"INSERT INTO {table} ({', '.join(columns)}) VALUES ({placeholders})", rows
        )
    logger.info("Appended %s rows to %s in %s", len(rows), table, db_path)
    return len(rows)


def _select(db_path: Path, table: str, columns: Sequence[str], where_run: str | None) -> list[tuple]:
    if not db_path.exists():
        return []
    with duckdb.connect(str(db_path), read_only=True) as connection:
        if not _table_exists(connection, table):
            return []
        query = f"SELECT {', '.join(columns)} FROM {table}"
        parameters: list[str] = []
        if where_run is not None:
            query += " WHERE run_id = ?"
            parameters.append(where_run)
        return connection.execute(query, parameters).fetchall()


def append_loss_records(db_path: Path, run_id: str, records: Sequence[LossRecord]) -> int:
    """Append loss records tagged with ``run_id``; returns the number appended."""

    _require_path(db_path)
    if not run_id:
        raise DataError("run_id must be a non-empty string")
    if not records:
        return 0

    rows = [
        (run_id, r.stage, r.epoch, r.step, r.loss, json.dumps(r.components, sort_keys=True))
        for r in (normalize_loss_record(record) for record in records)
    ]
    return _insert(
        db_path, LOSS_TABLE, ("run_id", "stage", "epoch", "step", "loss", "components"), rows
    )


def fetch_loss_records(
    db_path: Path, *, run_id: str | None = None, stage: str | None = None
) -> list[tuple[str, LossRecord]]:
    """Fetch ``(run_id, record)`` pairs ordered by run, stage and step."""

    _require_path(db_path)
    rows = _select(
        db_path,
        LOSS_TABLE,
        ("run_id", "stage", "epoch", "step", "loss", "components"),
        run_id,
    )
    fetched = [
        (
            row[0],
            LossRecord(
                stage=row[1],
                epoch=int(row[2]),
                step=int(row[3]),
                loss=float(row[4]),
                components=json.loads(row[5]),
            ),
        )
        for row in rows
        if stage is None or row[1] == stage
    ]
    stage_order = {name: index for index, name in enumerate(STAGES)}
    fetched.sort(key=lambda item: (item[0], stage_order[item[1].stage], item[1].step))
    return fetched


def append_sweep_rows(db_path: Path, rows: Sequence[SweepRow]) -> int:
    _require_path(db_path)
    if not rows:
        return 0
    normalized = [normalize_sweep_row(row) for row in rows]
    columns = SWEEP_COLUMNS
    return _insert(
        db_path,
        SWEEP_TABLE,
        columns,
        [tuple(getattr(row, name) for name in columns) for row in normalized],
    )


def fetch_sweep_rows(db_path: Path, *, run_id: str | None = None) -> list[SweepRow]:
    """Fetch sweep rows ordered by run, then ``n_inter`` descending."""

    _require_path(db_path)
    rows = [SweepRow(*row) for row in _select(db_path, SWEEP_TABLE, SWEEP_COLUMNS, run_id)]
    return sorted(rows, key=lambda row: (row.run_id, row.seed, -row.n_inter))


def append_ablation_rows(db_path: Path, rows: Sequence[AblationRow]) -> int:
    _require_path(db_path)
    if not rows:
        return 0
    normalized = [normalize_ablation_row(row) for row in rows]
    columns = ABLATION_COLUMNS
    return _insert(
        db_path,
        ABLATION_TABLE,
        columns,
        [tuple(getattr(row, name) for name in columns) for row in normalized],
    )


def fetch_ablation_rows(db_path: Path, *, run_id: str | None = None) -> list[AblationRow]:
    """Fetch ablation rows ordered by run, seed and arm (in ``ABLATION_ARMS`` order)."""

    _require_path(db_path)
    rows = [
        AblationRow(*row) for row in _select(db_path, ABLATION_TABLE, ABLATION_COLUMNS, run_id)
    ]
    arm_order = {arm: index for index, arm in enumerate(ABLATION_ARMS)}
    return sorted(rows, key=lambda row: (row.run_id, row.seed, arm_order[row.arm]))


def export_table_csv(db_path: Path, table: str, out_path: Path) -> Path:
    """Export one table to CSV with a header row.

    Raises
    ------
    DataError
        If the table name is unknown or the table does not exist yet.
    """

    _require_path(db_path)
    if table not in TABLES:
        raise DataError(f"unknown table {table!r}; expected one of {TABLES}")
    if not db_path.exists():
        raise FileNotFoundError(f"run store not found: {db_path}")

    out_path.parent.mkdir(parents=True, exist_ok=True)
    with duckdb.connect(str(db_path), read_only=True) as connection:
        if not _table_exists(connection, table):
            raise DataError(f"table {table!r} does not exist in {db_path}")
        escaped = str(out_path).replace("'", "''")
        connection.execute(f"COPY {table} TO '{escaped}' (HEADER, DELIMITER ',')")
    logger.info("Exported %s to %s", table, out_path)
    return out_path


def reset_run_store(db_path: Path) -> None:
    """Drop every run-store table, leaving the DuckDB file itself intact. Idempotent."""

    _require_path(db_path)
    if not db_path.exists():
        return
    with duckdb.connect(str(db_path)) as connection:
        for table in TABLES:
            connection.execute(f"DROP TABLE IF EXISTS {table}")
    logger.warning("Reset run store tables %s in %s", ", ".join(TABLES), db_path)
