import logging
import os
import sqlite3

import backoff


logger = logging.getLogger(__name__)


def get_connection(path=None):
    """Get database connection; ``path`` wins over DATABASE_PATH"""
    default_path = os.path.join(os.path.dirname(os.path.dirname(__file__)), "db", "runs.db")
    path = str(path or os.getenv("DATABASE_PATH", default_path))
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return sqlite3.connect(path)


@backoff.on_exception(backoff.expo, sqlite3.OperationalError, max_tries=5)
def init_schema(path=None):
    """Initialize the run ledger schema"""
    conn = get_connection(path)
    cursor = conn.cursor()

    try:
        # One row per experiment stage execution
        cursor.execute(
            """
            CREATE TABLE IF NOT EXISTS run_records (
                run_id TEXT NOT NULL,
                stage TEXT NOT NULL,
                seed INTEGER NOT NULL,
                config_hash TEXT NOT NULL,
                status TEXT NOT NULL,
                error TEXT,
                outputs TEXT, -- JSON list of written files
                duration_seconds REAL,
                created_at TEXT NOT NULL DEFAULT (datetime('now')),
                PRIMARY KEY (run_id, stage)
            )
        """
        )

        # Flattened metric rows mirroring the CSV outputs
        cursor.execute(
            """
            CREATE TABLE IF NOT EXISTS metric_rows (
                run_id TEXT NOT NULL,
                result_file TEXT NOT NULL,
                row_index INTEGER NOT NULL,
                scenario TEXT,
                modality TEXT,
                psr_db REAL,
                label TEXT, -- baseline, defense or attacker
                metric TEXT,
                value REAL,
                PRIMARY KEY (run_id, result_file, row_index)
            )
        """
        )

        cursor.execute("CREATE INDEX IF NOT EXISTS idx_run_records_hash ON run_records(config_hash)")
        cursor.execute("CREATE INDEX IF NOT EXISTS idx_metric_rows_file ON metric_rows(run_id, result_file)")

        conn.commit()
        logger.info("Database schema initialized")

    except Exception as e:
        conn.rollback()
        logger.error(f"Failed to initialize schema: {str(e)}")
        raise
    finally:
        conn.close()


@backoff.on_exception(backoff.expo, sqlite3.OperationalError, max_tries=5)
def upsert_many(table, records, path=None):
    """Insert or update multiple records"""
    if not records:
        return 0

    conn = get_connection(path)
    cursor = conn.cursor()

    try:
        # Column set comes from the first record; missing keys are stored as NULL
        columns = list(records[0])
        statement = f"INSERT OR REPLACE INTO {table} ({','.join(columns)}) VALUES ({','.join('?' * len(columns))})"
        cursor.executemany(statement, ([record.get(col) for col in columns] for record in records))
        conn.commit()
        return len(records)

    except Exception as e:
        conn.rollback()
        logger.error(f"Failed to upsert records: {str(e)}")
        raise
    finally:
        conn.close()


def query(sql, params=None, path=None):
    """Execute a SELECT query and return results as list of dictionaries"""
    conn = get_connection(path)
    conn.row_factory = sqlite3.Row
    cursor = conn.cursor()

    try:
        if params:
            cursor.execute(sql, params)
        else:
            cursor.execute(sql)

        rows = cursor.fetchall()
        return [dict(row) for row in rows]

    except Exception as e:
        logger.error(f"Query failed: {sql} with params {params}: {e}")
        raise
    finally:
        conn.close()
