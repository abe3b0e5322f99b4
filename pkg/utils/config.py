# utils/config.py
import logging
import os
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)


class Settings(BaseModel):
    """Runtime knobs, read from the environment (and `.env` via main.py)."""

    model_config = ConfigDict(frozen=True)

    max_jet_order: int = Field(2, ge=1, le=8)
    newton_tol: float = Field(1e-12, gt=0)
    newton_max_iter: int = Field(50, ge=1)
    psd_samples: int = Field(16, ge=1, le=1024)
    psd_tol: float = Field(1e-12, ge=0)
    log_level: str = "INFO"
    csv_precision: int = Field(17, ge=1, le=17)


_ENV_KEYS = {
    "max_jet_order": "PHS_MAX_JET_ORDER",
    "newton_tol": "PHS_NEWTON_TOL",
    "newton_max_iter": "PHS_NEWTON_MAX_ITER",
    "psd_samples": "PHS_PSD_SAMPLES",
    "psd_tol": "PHS_PSD_TOL",
    "log_level": "PHS_LOG_LEVEL",
    "csv_precision": "PHS_CSV_PRECISION",
}

_settings: Optional[Settings] = None


def _load_settings() -> Settings:
    values = {}
    for field, env_key in _ENV_KEYS.items():
        raw = os.getenv(env_key)
        if raw is None or raw.strip() == "":
            continue
        values[field] = raw.strip()
    try:
        return Settings(**values)
    except ValueError as exc:
        names = ", ".join(_ENV_KEYS[k] for k in values)
        error_msg = f"Invalid configuration in environment ({names}): {exc}"
        logger.error(error_msg)
        raise ValueError(error_msg) from exc


def get_settings() -> Settings:
    global _settings
    if _settings is None:
        _settings = _load_settings()
        logger.debug(f"Loaded settings: {_settings}")
    return _settings


def reset_settings() -> None:
    global _settings
    _settings = None
