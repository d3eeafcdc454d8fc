"""Plain-text outputs: delimited tables and key-value reports with ``#`` metadata headers.

Numbers are written with ``repr`` so output is locale independent and
byte-stable across runs.
"""
import math

import numpy as np


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if isinstance(x, (list, tuple, np.ndarray)):
        return ",".join(fmt(v) for v in np.asarray(x).ravel().tolist())
    return str(x)


def _header(meta):
    return [f"# {k}={fmt(v)}" for k, v in meta.items()]


def write_table(path, columns, rows, meta=None):
    """Comma-separated table; ``rows`` is a sequence of sequences or a list of column arrays via :func:`columns_to_rows`."""
    lines = _header(meta or {})
    lines.append("# columns=" + ",".join(columns))
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def columns_to_rows(*cols):
    cols = [np.asarray(c).ravel().tolist() for c in cols]
    return list(zip(*cols))


def write_report(path, values, meta=None):
    """``key = value`` lines; 2D arrays (covariances) are written one row per line."""
    lines = _header(meta or {})
    for k, v in values.items():
        arr = np.asarray(v) if isinstance(v, np.ndarray) else None
        if arr is not None and arr.ndim == 2:
            for i, row in enumerate(arr):
                lines.append(f"{k}[{i}] = {fmt(row)}")
        else:
            lines.append(f"{k} = {fmt(v)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_table(path):
    """Metadata dict, column names and a float array from :func:`write_table` output."""
    meta, columns, rows = {}, None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("columns="):
                    columns = body[len("columns="):].split(",")
                elif "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            if line.strip():
                rows.append([float(x) for x in line.split(",")])
    return meta, columns, np.array(rows, dtype=float).reshape(-1, len(columns) if columns else 0)
