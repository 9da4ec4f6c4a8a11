"""Local event log for runs, initializations and runtime guarantee checks.

All data is stored in a single SQLite database at ~/.tubedmpc/events.db.
Recording never interrupts a simulation: every helper swallows its own errors.
"""

import json
import sqlite3
from datetime import datetime
from typing import Any, Optional

from tubedmpc import config


EVENT_NAMES = (
    "run_started",
    "run_finished",
    "initialized",
    "theorem_violation",
    "solver_fallback",
    "sequential_recovered",
    "compare_finished",
)


# ---------------------------------------------------------------------------
# Database setup
# ---------------------------------------------------------------------------

def _get_db() -> sqlite3.Connection:
    """Open (and create if needed) the event database."""
    config.CONFIG_DIR.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(str(config.CONFIG_DIR / "events.db"))
    conn.row_factory = sqlite3.Row
    conn.execute("PRAGMA journal_mode=WAL")
    conn.execute("""
        CREATE TABLE IF NOT EXISTS events (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            timestamp TEXT NOT NULL,
            event TEXT NOT NULL,
            scenario TEXT,
            mode TEXT,
            run_id INTEGER,
            agent INTEGER,
            k INTEGER,
            meta TEXT
        )
    """)
    conn.execute("""
        CREATE INDEX IF NOT EXISTS idx_events_event
        ON events (event)
    """)
    conn.execute("""
        CREATE INDEX IF NOT EXISTS idx_events_scenario
        ON events (scenario)
    """)
    conn.commit()
    return conn


# ---------------------------------------------------------------------------
# Event logging
# ---------------------------------------------------------------------------

def log_event(
    event: str,
    scenario: Optional[str] = None,
    mode: Optional[str] = None,
    run_id: Optional[int] = None,
    agent: Optional[int] = None,
    k: Optional[int] = None,
    **meta: Any,
) -> None:
    """Record a single event.

    Args:
        event: Event name (one of EVENT_NAMES).
        scenario: Scenario name, if any.
        mode: Controller mode label, if any.
        run_id: Monte-Carlo run index, if any.
        agent: Agent id, if any.
        k: Time step, if any.
        **meta: Arbitrary extra data stored as a JSON blob.
    """
    try:
        conn = _get_db()
        conn.execute(
            "INSERT INTO events (timestamp, event, scenario, mode, run_id, agent, k, meta) "
            "VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
            (
                datetime.now().isoformat(),
                event,
                scenario,
                mode,
                run_id,
                agent,
                k,
                json.dumps(meta, default=str) if meta else None,
            ),
        )
        conn.commit()
        conn.close()
    except Exception:
        pass


# ---------------------------------------------------------------------------
# Query helpers
# ---------------------------------------------------------------------------

def get_run_stats(scenario: Optional[str] = None) -> dict[str, Any]:
    """Summary of recorded runs.

    Returns a dict with:
        runs_started: int
        runs_finished: int
        violations: int - theorem_violation events
        fallbacks: int - solver_fallback events
        last_run: str | None - ISO timestamp of the most recent finished run
        modes: dict[str, int] - finished runs per mode
    """
    where = " AND scenario = ?" if scenario else ""
    params: tuple = (scenario,) if scenario else ()
    try:
        conn = _get_db()

        def count(name: str) -> int:
            row = conn.execute(f"SELECT COUNT(*) as cnt FROM events WHERE event = ?{where}",
                               (name,) + params).fetchone()
            return row["cnt"] if row else 0

        last = conn.execute(f"SELECT MAX(timestamp) as ts FROM events WHERE event = 'run_finished'{where}",
                            params).fetchone()
        modes = {
            r["mode"]: r["cnt"]
            for r in conn.execute(
                f"SELECT mode, COUNT(*) as cnt FROM events WHERE event = 'run_finished'{where} "
                "AND mode IS NOT NULL GROUP BY mode",
                params,
            ).fetchall()
        }
        stats = {
            "runs_started": count("run_started"),
            "runs_finished": count("run_finished"),
            "violations": count("theorem_violation"),
            "fallbacks": count("solver_fallback"),
            "last_run": last["ts"] if last else None,
            "modes": modes,
        }
        conn.close()
        return stats
    except Exception:
        return _empty_stats()


def get_recent_events(limit: int = 20) -> list[dict[str, Any]]:
    """Most recent events, newest first."""
    try:
        conn = _get_db()
        rows = conn.execute(
            "SELECT timestamp, event, scenario, mode, run_id, agent, k, meta "
            "FROM events ORDER BY id DESC LIMIT ?",
            (limit,),
        ).fetchall()
        conn.close()
        return [
            {
                "timestamp": r["timestamp"],
                "event": r["event"],
                "scenario": r["scenario"],
                "mode": r["mode"],
                "run_id": r["run_id"],
                "agent": r["agent"],
                "k": r["k"],
                "meta": json.loads(r["meta"]) if r["meta"] else {},
            }
            for r in rows
        ]
    except Exception:
        return []


def get_violation_counts() -> dict[str, int]:
    """Theorem violations per kind."""
    try:
        conn = _get_db()
        rows = conn.execute(
            "SELECT json_extract(meta, '$.kind') as kind, COUNT(*) as cnt "
            "FROM events WHERE event = 'theorem_violation' GROUP BY kind"
        ).fetchall()
        conn.close()
        return {(r["kind"] or "unknown"): r["cnt"] for r in rows}
    except Exception:
        return {}


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------

def _empty_stats() -> dict[str, Any]:
    return {
        "runs_started": 0,
        "runs_finished": 0,
        "violations": 0,
        "fallbacks": 0,
        "last_run": None,
        "modes": {},
    }
