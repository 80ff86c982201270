"""Run registry on SQLAlchemy Core (sqlite by default)."""

import asyncio
import json
import logging
from pathlib import Path

from sqlalchemy import create_engine, text
from sqlalchemy.engine import Engine

from app.config import config

logger = logging.getLogger(__name__)

engine: Engine | None = None


SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS runs (
    scenario_hash  VARCHAR(64) PRIMARY KEY,
    name           VARCHAR(255) NOT NULL,
    kind           VARCHAR(20) NOT NULL,
    seed           BIGINT NOT NULL,
    status         VARCHAR(20) NOT NULL DEFAULT 'running',
    started_at     VARCHAR(40) NOT NULL,
    finished_at    VARCHAR(40),
    out_dir        TEXT NOT NULL,
    artifacts_json TEXT NOT NULL DEFAULT '{}',
    versions_json  TEXT NOT NULL DEFAULT '{}',
    metrics_json   TEXT NOT NULL DEFAULT '{}'
)
"""

INDEX_SQL = "CREATE INDEX IF NOT EXISTS idx_runs_name ON runs(name)"


def _sqlite_parent(url: str) -> Path | None:
    prefix = "sqlite:///"
    if url.startswith(prefix) and url != prefix + ":memory:":
        return Path(url[len(prefix):]).parent
    return None


def _init_sync():
    global engine
    parent = _sqlite_parent(config.registry_url)
    if parent is not None:
        parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(config.registry_url)
    with engine.begin() as conn:
        conn.execute(text(SCHEMA_SQL))
        conn.execute(text(INDEX_SQL))


async def init_db():
    """Create the engine and the schema."""
    await asyncio.to_thread(_init_sync)
    logger.info(f"Run registry ready at {config.registry_url}")


async def close_db():
    global engine
    if engine is not None:
        engine.dispose()
        engine = None


def _row(row) -> dict:
    out = dict(row._mapping)
    for key in ("artifacts_json", "versions_json", "metrics_json"):
        out[key.removesuffix("_json")] = json.loads(out.pop(key) or "{}")
    return out


# ─── Run operations ───

def _save_sync(record: dict):
    params = {
        "scenario_hash": record["scenario_hash"],
        "name": record["name"],
        "kind": record["kind"],
        "seed": int(record["seed"]),
        "status": record["status"],
        "started_at": record["started_at"],
        "finished_at": record.get("finished_at"),
        "out_dir": str(record["out_dir"]),
        "artifacts_json": json.dumps(record.get("artifacts", {}), sort_keys=True),
        "versions_json": json.dumps(record.get("versions", {}), sort_keys=True),
        "metrics_json": json.dumps(record.get("metrics", {}), sort_keys=True, default=str),
    }
    with engine.begin() as conn:
        conn.execute(text("DELETE FROM runs WHERE scenario_hash = :scenario_hash"), params)
        conn.execute(
            text(
                """INSERT INTO runs (scenario_hash, name, kind, seed, status, started_at, finished_at,
                                     out_dir, artifacts_json, versions_json, metrics_json)
                   VALUES (:scenario_hash, :name, :kind, :seed, :status, :started_at, :finished_at,
                           :out_dir, :artifacts_json, :versions_json, :metrics_json)"""
            ),
            params,
        )


async def save_run(record: dict):
    """Insert or replace a run by scenario hash. No-op when the registry is not initialized."""
    if engine is None:
        return
    await asyncio.to_thread(_save_sync, record)


def _get_sync(scenario_hash: str) -> dict | None:
    with engine.connect() as conn:
        row = conn.execute(
            text("SELECT * FROM runs WHERE scenario_hash = :h"), {"h": scenario_hash}
        ).fetchone()
        return _row(row) if row else None


async def get_run(scenario_hash: str) -> dict | None:
    if engine is None:
        return None
    return await asyncio.to_thread(_get_sync, scenario_hash)


def _list_sync(limit: int) -> list[dict]:
    with engine.connect() as conn:
        rows = conn.execute(
            text("SELECT * FROM runs ORDER BY started_at DESC LIMIT :limit"), {"limit": limit}
        ).fetchall()
        return [_row(r) for r in rows]


async def list_runs(limit: int = 100) -> list[dict]:
    if engine is None:
        return []
    return await asyncio.to_thread(_list_sync, limit)
