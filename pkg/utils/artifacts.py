# utils/artifacts.py
"""
Result files written by the CLI.

CSV follows RFC 4180 (header row, CRLF line endings, minimal quoting);
JSON summaries carry a ``schema_version``; every run leaves one manifest.
"""

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from config.settings import RunManifest  # noqa: E402

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator="\r\n")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def write_json(payload: Dict[str, Any], path: Path, kind: str) -> Path:
    """JSON summary without timestamps, so replays are byte-identical."""
    document = {"schema_version": SCHEMA_VERSION, "kind": kind}
    document.update(_jsonable(payload))
    path.write_text(json.dumps(document, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    logger.info(f"Wrote {kind} summary to {path}")
    return path


def write_manifest(manifest: RunManifest, out_dir: Path) -> Path:
    path = out_dir / f"{manifest.command}_manifest.json"
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote run manifest to {path}")
    return path


def read_manifest(path: str) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


def plot_curves(
    frame: pd.DataFrame,
    x: str,
    ys: Sequence[str],
    path: Path,
    title: str,
    ylabel: str,
    xlabel: Optional[str] = None,
) -> Path:
    """Line plot of one or more columns against ``x``, saved as PNG."""
    fig, ax = plt.subplots(figsize=(8, 5))
    for column in ys:
        ax.plot(frame[x], frame[column], marker="o" if len(frame) <= 20 else None, label=column)
    ax.set_title(title)
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if len(ys) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Saved plot {path}")
    return path
