"""Configuration management for tubedmpc."""

import json
import os
from pathlib import Path
from typing import Any, Iterable, Optional

from tubedmpc.errors import ScenarioError


CONFIG_DIR = Path(os.environ.get("TUBEDMPC_HOME", Path.home() / ".tubedmpc")).expanduser()
CONFIG_FILE = CONFIG_DIR / "config.json"
RUNS_DIR = CONFIG_DIR / "runs"

DEFAULT_CONFIG: dict[str, Any] = {
    "output_dir": str(RUNS_DIR),
    "runs": 20,
    "seed": 0,
    "strict": False,
    "workers": 1,
    "solver": "CLARABEL",
    "log_level": "WARNING",
    "rpi_eps": 0.01,
    "certify_samples": 1000,
    "record_events": True,
}


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def ensure_dirs() -> None:
    """Create the config and run output directories if they don't exist."""
    CONFIG_DIR.mkdir(parents=True, exist_ok=True)
    RUNS_DIR.mkdir(parents=True, exist_ok=True)


def load_config() -> dict[str, Any]:
    """Load config from disk, creating defaults if missing and back-filling new keys."""
    ensure_dirs()
    if not CONFIG_FILE.exists():
        save_config(DEFAULT_CONFIG)
        return DEFAULT_CONFIG.copy()
    with open(CONFIG_FILE, "r") as f:
        try:
            stored = json.load(f)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"config file {CONFIG_FILE} is not valid JSON: {exc}") from exc
    config = DEFAULT_CONFIG.copy()
    config.update(stored)
    return config


def save_config(config: dict[str, Any]) -> None:
    """Write config to disk."""
    ensure_dirs()
    with open(CONFIG_FILE, "w") as f:
        json.dump(config, f, indent=2)


def get_config_value(key: str, default: Any = None) -> Any:
    """Get a single value from the config."""
    config = load_config()
    return config.get(key, default)


def set_config_value(key: str, value: Any) -> dict[str, Any]:
    """Set a single value in the config. Returns the updated config.

    String values are parsed as JSON literals where possible, so ``"20"``
    is stored as a number and ``"true"`` as a boolean.
    """
    if key not in DEFAULT_CONFIG:
        raise ScenarioError(f"unknown config key {key!r}; known keys: {', '.join(sorted(DEFAULT_CONFIG))}")
    if isinstance(value, str):
        value = parse_value(value)
    config = load_config()
    config[key] = value
    save_config(config)
    return config


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------

def parse_value(raw: str) -> Any:
    """JSON literal if it parses, the raw string otherwise."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_assignments(items: Optional[Iterable[str]]) -> dict[str, Any]:
    """Parse repeated ``key=value`` flags."""
    out: dict[str, Any] = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ScenarioError(f"expected key=value, got {item!r}")
        out[key.strip()] = parse_value(raw.strip())
    return out


def run_settings(**flags: Any) -> dict[str, Any]:
    """Config values with the CLI flags that were actually given on top."""
    settings = load_config()
    settings.update({k: v for k, v in flags.items() if v is not None})
    return settings
