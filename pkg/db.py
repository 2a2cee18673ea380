"""SQLite index for cached SPM encodings and the run log."""
import sqlite3
from datetime import datetime, timezone
from pathlib import Path

import config

DB_PATH = Path(config.SPMAP_DB_PATH)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def get_connection():
    """Get a database connection, creating the DB file if needed."""
    DB_PATH.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(DB_PATH)
    conn.row_factory = sqlite3.Row
    return conn


def init_db():
    """Create tables if they don't exist."""
    conn = get_connection()
    try:
        conn.execute("""
            CREATE TABLE IF NOT EXISTS encode_cache (
                mesh_hash TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                path TEXT NOT NULL,
                truncation_count INTEGER NOT NULL DEFAULT 0,
                created_at TEXT NOT NULL,
                PRIMARY KEY (mesh_hash, config_hash)
            )
        """)
        conn.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                config_json TEXT NOT NULL,
                status TEXT NOT NULL,
                created_at TEXT NOT NULL
            )
        """)
        conn.commit()
    finally:
        conn.close()


# --- Encode cache ---

def get_cached_encoding(mesh_hash: str, config_hash: str) -> dict | None:
    """Cache row for (mesh, config), or None if missing or its file is gone."""
    conn = get_connection()
    try:
        row = conn.execute(
            "SELECT * FROM encode_cache WHERE mesh_hash = ? AND config_hash = ?",
            (mesh_hash, config_hash),
        ).fetchone()
        if not row:
            return None
        if not Path(row["path"]).exists():
            conn.execute(
                "DELETE FROM encode_cache WHERE mesh_hash = ? AND config_hash = ?",
                (mesh_hash, config_hash),
            )
            conn.commit()
            return None
        return dict(row)
    finally:
        conn.close()


def put_cached_encoding(mesh_hash: str, config_hash: str, path: str, truncation_count: int = 0) -> None:
    """Record (or replace) the SPM file holding an encoding."""
    conn = get_connection()
    try:
        conn.execute(
            """INSERT INTO encode_cache (mesh_hash, config_hash, path, truncation_count, created_at)
               VALUES (?, ?, ?, ?, ?)
               ON CONFLICT(mesh_hash, config_hash) DO UPDATE SET path = ?, truncation_count = ?, created_at = ?""",
            (mesh_hash, config_hash, path, truncation_count, _now(), path, truncation_count, _now()),
        )
        conn.commit()
    finally:
        conn.close()


# --- Runs ---

def log_run(command: str, config_json: str, status: str) -> int:
    """Append a run record and return its id."""
    conn = get_connection()
    try:
        cur = conn.execute(
            "INSERT INTO runs (command, config_json, status, created_at) VALUES (?, ?, ?, ?)",
            (command, config_json, status, _now()),
        )
        conn.commit()
        return int(cur.lastrowid)
    finally:
        conn.close()


def list_runs(command: str | None = None) -> list[dict]:
    conn = get_connection()
    try:
        if command:
            rows = conn.execute("SELECT * FROM runs WHERE command = ? ORDER BY id", (command,)).fetchall()
        else:
            rows = conn.execute("SELECT * FROM runs ORDER BY id").fetchall()
        return [dict(r) for r in rows]
    finally:
        conn.close()
