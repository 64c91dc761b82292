"""SQLite ledger of experiment results and training logs."""
import json
import os
import sqlite3
import threading
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional

from .models import ResultRecord, TrainLogEntry

DB_PATH = os.environ.get('METAGIN_LEDGER', os.path.join(os.getcwd(), 'metagin_ledger.db'))


def get_conn():
    conn = sqlite3.connect(DB_PATH, check_same_thread=False)
    conn.row_factory = sqlite3.Row
    return conn


def init_db():
    conn = get_conn()
    cur = conn.cursor()
    cur.execute('PRAGMA foreign_keys = ON;')
    cur.execute('''
    CREATE TABLE IF NOT EXISTS results (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        fingerprint TEXT NOT NULL,
        name TEXT NOT NULL,
        dataset TEXT NOT NULL,
        variant TEXT NOT NULL,
        noise_kind TEXT NOT NULL,
        epsilon REAL NOT NULL,
        mean_acc REAL NOT NULL,
        std_acc REAL NOT NULL,
        rep_count INTEGER NOT NULL,
        payload TEXT NOT NULL,
        recorded_at TEXT NOT NULL
    )
    ''')
    cur.execute('CREATE INDEX IF NOT EXISTS idx_results_fingerprint ON results (fingerprint)')
    cur.execute('''
    CREATE TABLE IF NOT EXISTS train_log (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        result_id INTEGER NOT NULL,
        repetition INTEGER NOT NULL,
        episode INTEGER NOT NULL,
        train_loss REAL,
        val_accuracy REAL,
        val_clean_accuracy REAL,
        FOREIGN KEY(result_id) REFERENCES results(id) ON DELETE CASCADE
    )
    ''')
    conn.commit()
    conn.close()


_lock = threading.Lock()


def add_result(record: ResultRecord) -> int:
    now = datetime.now(timezone.utc).isoformat()
    with _lock:
        conn = get_conn()
        cur = conn.cursor()
        cur.execute(
            'INSERT INTO results (fingerprint, name, dataset, variant, noise_kind, epsilon, mean_acc, std_acc, '
            'rep_count, payload, recorded_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)',
            (record.fingerprint, record.name, record.dataset, record.variant, record.noise_kind, record.epsilon,
             record.mean, record.std, len(record.accuracies), record.model_dump_json(), now))
        rid = cur.lastrowid
        conn.commit()
        conn.close()
        return rid


def add_train_log(result_id: int, repetition: int, entries: Iterable[TrainLogEntry]):
    rows = [(result_id, repetition, e.episode, _finite(e.train_loss), e.val_accuracy, e.val_clean_accuracy)
            for e in entries]
    with _lock:
        conn = get_conn()
        cur = conn.cursor()
        cur.executemany('INSERT INTO train_log (result_id, repetition, episode, train_loss, val_accuracy, '
                        'val_clean_accuracy) VALUES (?, ?, ?, ?, ?, ?)', rows)
        conn.commit()
        conn.close()


def _finite(x: Optional[float]) -> Optional[float]:
    # sqlite stores NaN as NULL anyway; keep it explicit
    return None if x is None or x != x else x


def _row_to_dict(r: sqlite3.Row) -> Dict[str, Any]:
    return {
        'id': r['id'],
        'fingerprint': r['fingerprint'],
        'name': r['name'],
        'dataset': r['dataset'],
        'variant': r['variant'],
        'noise_kind': r['noise_kind'],
        'epsilon': r['epsilon'],
        'mean_acc': r['mean_acc'],
        'std_acc': r['std_acc'],
        'rep_count': r['rep_count'],
        'recorded_at': r['recorded_at'],
    }


def get_results(limit: int = 100, variant: Optional[str] = None) -> List[Dict[str, Any]]:
    conn = get_conn()
    cur = conn.cursor()
    if variant:
        cur.execute('SELECT * FROM results WHERE variant = ? ORDER BY id DESC LIMIT ?', (variant, limit))
    else:
        cur.execute('SELECT * FROM results ORDER BY id DESC LIMIT ?', (limit,))
    rows = cur.fetchall()
    conn.close()
    return [_row_to_dict(r) for r in rows]


def get_result(fingerprint: str) -> Optional[ResultRecord]:
    """Most recent record with this fingerprint."""
    conn = get_conn()
    cur = conn.cursor()
    cur.execute('SELECT payload FROM results WHERE fingerprint = ? ORDER BY id DESC LIMIT 1', (fingerprint,))
    row = cur.fetchone()
    conn.close()
    if not row:
        return None
    return ResultRecord.model_validate(json.loads(row['payload']))


def get_train_log(result_id: int) -> List[Dict[str, Any]]:
    conn = get_conn()
    cur = conn.cursor()
    cur.execute('SELECT repetition, episode, train_loss, val_accuracy, val_clean_accuracy FROM train_log '
                'WHERE result_id = ? ORDER BY repetition, episode', (result_id,))
    rows = cur.fetchall()
    conn.close()
    return [dict(r) for r in rows]


def get_summary() -> Dict[str, Any]:
    conn = get_conn()
    cur = conn.cursor()
    cur.execute('SELECT COUNT(*) as total FROM results')
    total = cur.fetchone()['total']
    cur.execute('SELECT variant, COUNT(*) as cnt, MAX(mean_acc) as best FROM results GROUP BY variant')
    by_variant = {r['variant']: {'count': r['cnt'], 'best_mean_acc': r['best']} for r in cur.fetchall()}
    cur.execute('SELECT recorded_at FROM results ORDER BY id DESC LIMIT 1')
    last = cur.fetchone()
    conn.close()
    return {
        'total_results': total,
        'by_variant': by_variant,
        'last_recorded_at': last['recorded_at'] if last else None,
    }
