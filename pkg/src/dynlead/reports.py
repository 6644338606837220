"""CSV / JSON writers shared by the CLI commands.

Every CSV starts with a ``#`` provenance line (package version and config
hash), then a header row.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import __version__


def provenance_line(config_sha: str) -> str:
    return f"# dynlead {__version__} config_sha256={config_sha}"


def _fmt(v) -> str:
    if v is np.ma.masked:
        return "masked"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows, config_sha: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(provenance_line(config_sha) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    """Header and data rows, skipping ``#`` comment lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def write_spectrum(path, report, config_sha: str) -> Path:
    rows = ((i, s) for i, s in enumerate(report.singular_values))
    return write_csv(path, ["index", "singular_value"], rows, config_sha)


def write_source_values(path, values, config_sha: str, extra: dict | None = None) -> Path:
    """One row per source: index, value, then any extra per-source columns."""
    extra = extra or {}
    header = ["source", "value", *extra]
    cols = [np.ma.asarray(values)] + [np.asarray(v) for v in extra.values()]
    rows = ([i] + [c[i] for c in cols] for i in range(len(cols[0])))
    return write_csv(path, header, rows, config_sha)


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
