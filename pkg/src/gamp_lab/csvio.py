"""Round-trippable CSV tables with ``# key=value`` metadata lines."""
from __future__ import annotations

import csv
import io

from .errors import ConfigError


def format_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool,)):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def parse_value(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def dumps_table(columns, rows, metadata=None) -> str:
    buf = io.StringIO()
    for key, value in (metadata or {}).items():
        buf.write(f"# {key}={format_value(value)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def loads_table(text: str):
    """Inverse of :func:`dumps_table`: returns (columns, rows, metadata)."""
    metadata = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# ") and "=" in line and not body:
            key, _, value = line[2:].partition("=")
            metadata[key] = parse_value(value)
        elif line:
            body.append(line)
    if not body:
        raise ConfigError("CSV has no header row")
    reader = csv.reader(body)
    columns = next(reader)
    rows = [[parse_value(v) for v in row] for row in reader]
    for i, row in enumerate(rows):
        if len(row) != len(columns):
            raise ConfigError(f"row {i + 1} has {len(row)} fields, expected {len(columns)}", line=i + 2 + len(metadata))
    return columns, rows, metadata
