"""Metric deltas between two results.csv reports."""
from __future__ import annotations

import math

from .runner import KEY_COLUMNS, read_results


class SchemaError(ValueError):
    pass


# identity columns that are allowed to differ between the two reports
_IGNORED_KEYS = ("config_hash", "mode")


def _key(row):
    return " ".join(f"{c}={row[c]}" for c in KEY_COLUMNS
                    if c not in _IGNORED_KEYS and row.get(c, "") != "")


def compare(path_a, path_b) -> list[dict]:
    """Absolute and percentage change from report ``a`` to report ``b``.

    Rows are matched on model, setting and NFE; every numeric metric column
    yields one delta. Both reports must share their column set.
    """
    cols_a, rows_a = read_results(path_a)
    cols_b, rows_b = read_results(path_b)
    missing_b = [c for c in cols_a if c not in cols_b]
    missing_a = [c for c in cols_b if c not in cols_a]
    if missing_a or missing_b:
        parts = []
        if missing_b:
            parts.append(f"{path_b} lacks {', '.join(missing_b)}")
        if missing_a:
            parts.append(f"{path_a} lacks {', '.join(missing_a)}")
        raise SchemaError("schema mismatch: " + "; ".join(parts))
    if not set(KEY_COLUMNS) <= set(cols_a):
        raise SchemaError(f"schema mismatch: reports lack key columns "
                          f"{', '.join(sorted(set(KEY_COLUMNS) - set(cols_a)))}")
    metrics = [c for c in cols_a if c not in KEY_COLUMNS]
    index_b = {_key(r): r for r in rows_b}
    out = []
    for ra in rows_a:
        rb = index_b.get(_key(ra))
        if rb is None:
            continue
        for m in metrics:
            a, b = float(ra[m]), float(rb[m])
            delta = b - a
            pct = 100.0 * delta / a if a != 0 else (0.0 if delta == 0 else math.nan)
            out.append({"key": _key(ra), "metric": m, "a": a, "b": b, "delta": delta,
                        "percent": pct})
    if rows_a and rows_b and not out:
        raise SchemaError("the reports share no model/setting/NFE rows")
    return out


DELTA_COLUMNS = ("key", "metric", "a", "b", "delta", "percent")
