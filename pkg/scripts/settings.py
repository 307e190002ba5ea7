"""
Environment defaults (DISCOFLUX_*). The CLI calls load_dotenv() first, so a
local .env file feeds these too.
"""

import os
from typing import Any

ENV_PREFIX = "DISCOFLUX_"
ENV_KEYS = {
    "THREADS": "threads",
    "SEED": "seed",
    "OUT": "out_dir",
    "EVENT_BUDGET": "event_budget",
    "DRY_RUN": "dry_run",
}


def env_defaults() -> dict[str, Any]:
    """Config keys found in the environment, as raw strings for validation downstream."""
    out = {}
    for suffix, key in ENV_KEYS.items():
        value = os.getenv(ENV_PREFIX + suffix)
        if value is not None and value.strip() != "":
            out[key] = value.strip()
    return out


def dry_run() -> bool:
    return os.getenv(ENV_PREFIX + "DRY_RUN", "").strip().lower() in ("1", "true", "yes")
