"""Result files of one run, written atomically."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List

import pandas as pd
from loguru import logger

from difsim.metrics import MetricsReport


def atomic_write_text(path: Path, text: str) -> None:
    """Write ``text`` to a sibling temp file, then rename it over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, frame: pd.DataFrame) -> None:
    atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def write_json(path: Path, payload: Any) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, default=str) + "\n")


def write_report(report: MetricsReport, out_dir: str | Path) -> List[str]:
    """Write every table of ``report`` under ``out_dir``.

    Returns:
        Paths of the written files, in write order.
    """
    root = Path(out_dir)
    tables: Dict[str, pd.DataFrame] = {
        "throughput.csv": report.throughput,
        "flows.csv": report.flows,
        "ears.csv": report.ears,
        "margins.csv": report.margins,
        "links.csv": report.links,
        "convergence.csv": report.convergence,
    }
    written: List[str] = []
    for name, frame in tables.items():
        write_csv(root / name, frame)
        written.append(str(root / name))

    summary = dict(report.summary)
    if report.violations:
        summary["violations"] = report.violations
    write_json(root / "summary.json", summary)
    written.append(str(root / "summary.json"))

    if report.topology_json is not None:
        atomic_write_text(root / "topology.json", report.topology_json + "\n")
        written.append(str(root / "topology.json"))
    logger.info("wrote {} file(s) to {}", len(written), root)
    return written
