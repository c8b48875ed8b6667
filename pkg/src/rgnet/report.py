"""Text-table and key-value report writers.

Every command that reports numbers emits both a human-readable aligned
table and a machine-readable key=value file.
"""

from __future__ import annotations

import os


def format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(headers))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "--" if v != v else f"{v:.2f}"
    return str(v)


def kv_lines(mapping) -> str:
    out = []
    for key, value in mapping.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(_kv_value(v) for v in value)
        else:
            value = _kv_value(value)
        out.append(f"{key}={value}")
    return "\n".join(out) + "\n"


def _kv_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_text(path, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def write_report(out_dir, name: str, table: str, mapping):
    """Write <name>.txt (table) and <name>.kv (key=value) under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    write_text(os.path.join(out_dir, f"{name}.txt"), table)
    write_text(os.path.join(out_dir, f"{name}.kv"), kv_lines(mapping))
