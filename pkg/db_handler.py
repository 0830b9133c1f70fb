"""
SQLite run registry for the volseg toolkit.
Stores one row per training/ablation run plus its metric values.
"""

import datetime
import json
import logging
import os
import sqlite3
from typing import Dict, List, Optional, Tuple

import pandas as pd

import config

# Setup logging
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

DB_VERSION = 1


def ensure_db_exists(db_file: Optional[str] = None) -> str:
    """
    Ensure the registry directory exists.

    Returns:
        The registry path that will be used
    """
    db_file = db_file or config.REGISTRY_FILE
    directory = os.path.dirname(db_file)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    return db_file


def get_connection(db_file: Optional[str] = None) -> sqlite3.Connection:
    """
    Get a connection to the registry, creating the schema on first use.

    Args:
        db_file: Registry path (default: config.REGISTRY_FILE)

    Returns:
        sqlite3.Connection: An active database connection
    """
    conn = sqlite3.connect(ensure_db_exists(db_file))
    conn.execute("PRAGMA foreign_keys = ON")
    _create_schema(conn)
    return conn


def _create_schema(conn: sqlite3.Connection) -> None:
    conn.execute('''
    CREATE TABLE IF NOT EXISTS settings (
        key TEXT PRIMARY KEY,
        value TEXT,
        updated_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
    )
    ''')
    conn.execute('''
    CREATE TABLE IF NOT EXISTS runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        timestamp TEXT,
        kind TEXT,
        variant TEXT,
        seed INTEGER,
        setting TEXT,
        checkpoint TEXT,
        config TEXT
    )
    ''')
    conn.execute('''
    CREATE TABLE IF NOT EXISTS run_metrics (
        run_id INTEGER REFERENCES runs(id) ON DELETE CASCADE,
        metric TEXT,
        value REAL,
        PRIMARY KEY (run_id, metric)
    )
    ''')
    conn.execute("INSERT OR REPLACE INTO settings (key, value) VALUES ('db_version', ?)", (str(DB_VERSION),))
    conn.commit()


def initialize_database(db_file: Optional[str] = None) -> Tuple[bool, str]:
    """
    Initialize the registry schema if it doesn't already exist.

    Returns:
        Tuple[bool, str]: A tuple of (success, message)
    """
    try:
        conn = get_connection(db_file)
        conn.close()
        return True, "Run registry initialized successfully"
    except Exception as e:
        error_message = f"Error initializing run registry: {e}"
        logger.error(error_message)
        return False, error_message


def record_run(kind: str, variant: str, seed: int, checkpoint: str, metrics: Dict[str, float],
               setting: str = "", run_config: Optional[dict] = None,
               db_file: Optional[str] = None) -> Tuple[bool, str]:
    """
    Add a run and its metrics to the registry.

    Args:
        kind: "train" or "ablation"
        variant: Variant name (e.g. "baseline", "all")
        seed: Training seed
        checkpoint: Path of the checkpoint the metrics belong to
        metrics: Metric name -> value; NaN values are stored as NULL
        setting: Evaluation setting ("volume" or "center")
        run_config: Training configuration echo
        db_file: Registry path

    Returns:
        Tuple[bool, str]: A tuple of (success, message)
    """
    try:
        conn = get_connection(db_file)
        timestamp = datetime.datetime.now().isoformat()
        cursor = conn.execute('''
        INSERT INTO runs (timestamp, kind, variant, seed, setting, checkpoint, config)
        VALUES (?, ?, ?, ?, ?, ?, ?)
        ''', (timestamp, kind, variant, int(seed), setting, checkpoint, json.dumps(run_config or {}, sort_keys=True)))
        run_id = cursor.lastrowid

        for metric, value in metrics.items():
            value = None if value is None or value != value else float(value)
            conn.execute("INSERT INTO run_metrics (run_id, metric, value) VALUES (?, ?, ?)", (run_id, metric, value))

        conn.commit()
        conn.close()
        return True, f"Recorded run {run_id}"
    except Exception as e:
        error_message = f"Error recording run: {e}"
        logger.error(error_message)
        return False, error_message


def get_run_history(limit: int = 100, db_file: Optional[str] = None) -> List[Dict]:
    """
    Get the most recent runs, newest first.

    Returns:
        List[Dict]: Run entries, each with a nested metrics dict
    """
    try:
        conn = get_connection(db_file)
        cursor = conn.execute('''
        SELECT id, timestamp, kind, variant, seed, setting, checkpoint, config
        FROM runs
        ORDER BY id DESC
        LIMIT ?
        ''', (limit,))

        history = []
        for row in cursor.fetchall():
            run_config = {}
            if row[7]:
                try:
                    run_config = json.loads(row[7])
                except (json.JSONDecodeError, TypeError):
                    pass
            metrics = dict(conn.execute("SELECT metric, value FROM run_metrics WHERE run_id = ?", (row[0],)).fetchall())
            history.append({
                'id': row[0],
                'timestamp': row[1],
                'kind': row[2],
                'variant': row[3],
                'seed': row[4],
                'setting': row[5],
                'checkpoint': row[6],
                'config': run_config,
                'metrics': metrics,
            })

        conn.close()
        return history
    except Exception as e:
        logger.error(f"Error getting run history: {e}")
        return []


def load_run_metrics(db_file: Optional[str] = None) -> pd.DataFrame:
    """
    All runs with one column per metric.

    Returns:
        DataFrame with columns id, timestamp, kind, variant, seed, setting, checkpoint, <metrics...>
    """
    columns = ['id', 'timestamp', 'kind', 'variant', 'seed', 'setting', 'checkpoint']
    try:
        conn = get_connection(db_file)
        runs = pd.read_sql_query(f"SELECT {', '.join(columns)} FROM runs ORDER BY id", conn)
        metrics = pd.read_sql_query("SELECT run_id, metric, value FROM run_metrics", conn)
        conn.close()
    except Exception as e:
        logger.error(f"Error loading run metrics: {e}")
        return pd.DataFrame(columns=columns)

    if metrics.empty:
        return runs
    wide = metrics.pivot(index='run_id', columns='metric', values='value')
    wide.columns.name = None
    return runs.merge(wide, left_on='id', right_index=True, how='left')
