"""Machine-readable outputs: the JSON summary line, JSON-lines logs and CSV tables."""

from __future__ import annotations

import csv
import json
import math
import sys
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any, TextIO

STATUS_OK = "ok"
STATUS_NOT_CONVERGED = "not_converged"
STATUS_DIVERGED = "diverged"
STATUS_USAGE_ERROR = "usage_error"
STATUS_IO_ERROR = "io_error"


def _jsonable(value: Any) -> Any:
    """Replace non-finite floats with None so every line is strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        return _jsonable(value.item())
    return value


def dumps(record: Mapping[str, Any]) -> str:
    return json.dumps(_jsonable(record), sort_keys=False, allow_nan=False)


def emit_summary(status: str, stream: TextIO | None = None, **fields: Any) -> None:
    """Print the one-line JSON summary that ends every command's stdout."""
    stream = stream or sys.stdout
    print(dumps({"status": status, **fields}), file=stream, flush=True)


def write_jsonl(records: Iterable[Mapping[str, Any]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(dumps(record) + "\n")


def write_json(document: Mapping[str, Any], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(document), f, indent=2, allow_nan=False)
        f.write("\n")


def write_csv(
    rows: Iterable[Mapping[str, Any]], fieldnames: Sequence[str], path: str | Path
) -> int:
    """Write rows with a header line; returns the number of data rows."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _jsonable(row.get(k)) for k in fieldnames})
            count += 1
    return count
