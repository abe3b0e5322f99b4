# utils/csv_writer.py
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from schemas.phs import LEDGER_COLUMNS, PowerLedgerRow
from utils.config import get_settings

logger = logging.getLogger(__name__)


def _float_format() -> str:
    return f"%.{get_settings().csv_precision}g"


def ledger_frame(rows: Sequence[PowerLedgerRow]) -> pd.DataFrame:
    return pd.DataFrame([row.values() for row in rows], columns=list(LEDGER_COLUMNS), dtype=float)


def write_ledger_csv(rows: Sequence[PowerLedgerRow], path) -> Path:
    """Header plus one line per step; identical rows give identical bytes."""
    path = Path(path)
    ledger_frame(rows).to_csv(path, index=False, float_format=_float_format(), lineterminator="\n")
    logger.info(f"Wrote {len(rows)} ledger rows to {path}")
    return path


def trajectory_frame(states, nodes: np.ndarray, fields: Sequence[str]) -> pd.DataFrame:
    """Long format: one row per node per sampled time."""
    columns = ["t", "X", *fields]
    frames = []
    for state in states:
        block = {"t": np.full(len(nodes), state.t), "X": np.asarray(nodes, dtype=float)}
        block.update({f: np.asarray(state.values[f], dtype=float) for f in fields})
        frames.append(pd.DataFrame(block, columns=columns))
    if not frames:
        return pd.DataFrame(columns=columns, dtype=float)
    return pd.concat(frames, ignore_index=True)


def write_trajectory_csv(states, nodes: np.ndarray, fields: Sequence[str], path) -> Path:
    path = Path(path)
    trajectory_frame(states, nodes, fields).to_csv(
        path, index=False, float_format=_float_format(), lineterminator="\n"
    )
    logger.info(f"Wrote {len(states)} snapshots to {path}")
    return path
