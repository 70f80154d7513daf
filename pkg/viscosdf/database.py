import json
import logging
import os
from pathlib import Path

import duckdb
import polars as pl

from .models import RunManifest

logger = logging.getLogger(__name__)

DEFAULT_OUT = "runs"


def output_root() -> Path:
    """Default output root, overridable with VISCOSDF_OUT"""
    return Path(os.environ.get("VISCOSDF_OUT", DEFAULT_OUT))


class RunDatabase:
    """Append-only registry of CLI runs plus named result tables, kept in duckdb"""

    def __init__(self, root: Path | str | None = None):
        self.root = Path(root) if root is not None else output_root()
        self.root.mkdir(parents=True, exist_ok=True)
        self.db = self.root / "registry.duckdb"
        self.con = duckdb.connect(str(self.db))
        self.con.execute(
            """
            CREATE TABLE IF NOT EXISTS manifests (
                command VARCHAR,
                config_path VARCHAR,
                seed BIGINT,
                git_describe VARCHAR,
                out_dir VARCHAR,
                input_hashes VARCHAR,
                exit_code INTEGER,
                started_at TIMESTAMP,
                finished_at TIMESTAMP
            )
            """
        )

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self.con.close()

    def append_manifest(self, manifest: RunManifest) -> None:
        self.con.execute(
            "INSERT INTO manifests VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
            [
                manifest.command,
                manifest.config_path,
                manifest.seed,
                manifest.git_describe,
                manifest.out_dir,
                json.dumps(manifest.input_hashes, sort_keys=True),
                manifest.exit_code,
                manifest.started_at,
                manifest.finished_at,
            ],
        )
        logger.debug("registered %s run in %s", manifest.command, self.db)

    def fetch_manifests(self) -> pl.DataFrame:
        query = "SELECT * FROM manifests ORDER BY started_at"
        return self.con.execute(query).pl()

    def df2db(self, df: pl.DataFrame, table: str) -> None:
        """Replace `table` with the contents of a polars frame"""
        if not table.isidentifier():
            raise ValueError(f"invalid table name {table!r}")
        self.con.register("_frame", df.to_arrow())
        self.con.execute(f"CREATE OR REPLACE TABLE {table} AS SELECT * FROM _frame")
        self.con.unregister("_frame")

    def fetch_table(self, table: str) -> pl.DataFrame:
        if not table.isidentifier():
            raise ValueError(f"invalid table name {table!r}")
        return self.con.execute(f"SELECT * FROM {table}").pl()


def write_manifest(manifest: RunManifest, run_dir: Path, db: RunDatabase | None = None) -> Path:
    """Write manifest.json into the run directory and append it to the registry"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2))
    if db is not None:
        db.append_manifest(manifest)
    return path
