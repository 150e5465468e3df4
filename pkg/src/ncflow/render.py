"""Plain-text renderings of References and run state for the CLI and API."""

from __future__ import annotations

import json
from typing import Iterable

from .refs import Reference, Sign

VIEWS = ("table", "list", "json")


def format_cell(cell) -> str:
    if isinstance(cell, Sign):
        return f"sign({cell.uri})"
    if isinstance(cell, str):
        return cell
    return json.dumps(cell, sort_keys=True, ensure_ascii=False)


def render_reference(ref: Reference, view: str = "table") -> str:
    if view == "json":
        return json.dumps(ref.to_json(), indent=2, sort_keys=True, ensure_ascii=False)
    if view == "list":
        return _render_list(ref)
    if view == "table":
        return _render_table(ref)
    raise ValueError(f"unknown view {view!r}; expected one of {', '.join(VIEWS)}")


def _render_list(ref: Reference, depth: int = 0) -> str:
    pad = "  " * depth
    if not ref.axes:
        return f"{pad}{format_cell(ref.item())}"
    axis, length = ref.axes[0]
    lines = []
    for i in range(length):
        sub = ref.slice(axis, i)
        if sub.axes:
            lines.append(f"{pad}- {axis}[{i}]:")
            lines.append(_render_list(sub, depth + 1))
        else:
            lines.append(f"{pad}- {axis}[{i}]: {format_cell(sub.item())}")
    if not lines:
        lines.append(f"{pad}- {axis}: (empty)")
    return "\n".join(lines)


def _pad_columns(rows: list[list[str]]) -> str:
    widths = [
        max(len(row[col]) for row in rows) for col in range(max(map(len, rows)))
    ]
    out = []
    for row in rows:
        out.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return "\n".join(out)


def _render_table(ref: Reference) -> str:
    if not ref.axes:
        return format_cell(ref.item())
    if len(ref.axes) == 1:
        axis, length = ref.axes[0]
        if length == 0:
            return f"{axis}: (empty)"
        rows = [[axis, "value"]]
        for i in range(length):
            rows.append([str(i), format_cell(ref.slice(axis, i).item())])
        return _pad_columns(rows)

    # two or more axes: the last axis spans columns, the rest label the rows
    *row_axes, (col_axis, col_len) = ref.axes
    header = [" x ".join(name for name, _ in row_axes)]
    header += [f"{col_axis}[{j}]" for j in range(col_len)]
    rows = [header]
    for coords in _axis_coords([length for _, length in row_axes]):
        label = ",".join(str(c) for c in coords)
        sub = ref
        for (name, _), c in zip(row_axes, coords):
            sub = sub.slice(name, c)
        cells = [format_cell(sub.slice(col_axis, j).item()) for j in range(col_len)]
        rows.append([label] + cells)
    if len(rows) == 1:
        return f"{header[0]}: (empty)"
    return _pad_columns(rows)


def _axis_coords(lengths: list[int]) -> Iterable[tuple[int, ...]]:
    if not lengths:
        yield ()
        return
    for head in range(lengths[0]):
        for rest in _axis_coords(lengths[1:]):
            yield (head,) + rest


def render_statuses(blackboard: dict[str, str], key=None) -> str:
    """One `node  status` line per instance, in schedule order."""
    items = sorted(blackboard.items(), key=(lambda kv: key(kv[0])) if key else None)
    if not items:
        return "(no nodes)"
    rows = [[node, status] for node, status in items]
    return _pad_columns(rows)


def render_stats(stats: dict[str, int]) -> str:
    semantic = stats.get("semantic_count", 0)
    syntactic = stats.get("syntactic_count", 0)
    total = semantic + syntactic
    fraction = (syntactic / total) if total else 0.0
    return (
        f"nodes: {total}\n"
        f"semantic: {semantic}\n"
        f"syntactic: {syntactic}\n"
        f"syntactic_fraction: {fraction:.3f}"
    )
