"""Deterministic CSV/JSON writers.

Every float is written with 17 significant digits so that a value read back
is bit-identical to the one written.  Non-finite floats become ``nan``,
``inf`` and ``-inf`` in CSV and ``null`` in JSON (with the reason left to
the caller).
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Sequence

import mpmath
import numpy as np

__all__ = [
    "fmt_float",
    "fmt_extended",
    "to_json",
    "write_json",
    "write_csv",
    "read_csv",
    "CSV_SCHEMAS",
]

#: Column layouts of the CSV artifacts, by operation.
CSV_SCHEMAS: dict[str, tuple[str, ...]] = {
    "fk-eig": ("p", "theta2", "eigenvalue", "J_over_p", "converged", "method", "residual"),
    "fk-sweep": ("p", "theta2", "J_over_p", "converged"),
    "kappa": ("t", "p", "estimate", "stderr", "n", "excluded", "argmax_x", "argmax_v", "edge_warning"),
    "gp": ("p", "t", "x", "estimate", "stderr", "n", "excluded", "saturated", "log_rate"),
    "lyapunov": ("p", "estimate", "stderr", "T", "n", "excluded", "inconsistent"),
    "couple": ("t", "mean_f_R", "mean_g_S", "mean_omega", "se_f_R", "se_g_S", "se_omega"),
}


def fmt_float(x: float) -> str:
    """17 significant digits, shortest exponent form; non-finite as nan/inf/-inf.

    >>> fmt_float(0.1)
    '0.10000000000000001'
    >>> fmt_float(2.0)
    '2'
    """
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def fmt_extended(x) -> str:
    """An mpmath number as a 17-digit decimal string, exponent unrestricted."""
    return mpmath.nstr(mpmath.mpf(x), 17, min_fixed=1, max_fixed=0, strip_zeros=False)


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_cell(u) for u in np.asarray(v).ravel().tolist())
    if v is None:
        return ""
    return str(v)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a header and rows with ``\\n`` line endings; vectors become space-separated cells."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        w.writerow([_cell(v) for v in row])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def to_json(obj: Any, indent: int = 2, _level: int = 0) -> str:
    """JSON text with keys in insertion order and floats at 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_json_str(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(to_json(v, indent, _level + 1) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + to_json(v, indent, _level + 1) for v in seq) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, mpmath.mpf):
        return _json_str(fmt_extended(obj))
    return _json_str(str(obj))


def _json_str(s: str) -> str:
    return json.dumps(s, ensure_ascii=True)


def write_json(path: str | os.PathLike, obj: Any) -> Path:
    path = Path(path)
    path.write_text(to_json(obj) + "\n", encoding="utf-8")
    return path
