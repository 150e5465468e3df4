"""The built-in syntactic operators.

All of these are pure functions of their input References (``save`` also
writes a file, but its returned value is just its input). None of them ever
fetches a sign's content; deterministic replay of a syntactic node is
guaranteed byte-for-byte.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from .errors import OperatorError
from .refs import Reference, Sign, canonical_json_bytes, scalar
from .refs import _cell_to_json

Inputs = list[tuple[str, Reference]]


def execute(op: str, inputs: Inputs, outputs_dir: Optional[Path] = None) -> Reference:
    try:
        handler = _HANDLERS[op]
    except KeyError:
        raise OperatorError(op, "not a built-in operator")
    if op == "save":
        return handler(inputs, outputs_dir)
    return handler(inputs)


def _expect(op: str, inputs: Inputs, count: int) -> None:
    if len(inputs) != count:
        raise OperatorError(
            op, f"takes exactly {count} input(s), got {len(inputs)}"
        )


def _scalar_text(op: str, name: str, ref: Reference) -> str:
    if ref.axes or not isinstance(ref.cells[0], str):
        raise OperatorError(op, f"input {name!r} must be a scalar text value")
    return ref.cells[0]


def op_route(inputs: Inputs) -> Reference:
    """Select the branch whose concept name equals the selector's text."""
    if len(inputs) < 2:
        raise OperatorError("route", "takes a selector plus at least one branch")
    sel_name, sel = inputs[0]
    wanted = _scalar_text("route", sel_name, sel)
    branches = inputs[1:]
    for name, ref in branches:
        if name == wanted:
            return ref
    names = [name for name, _ in branches]
    raise OperatorError("route", f"no branch named {wanted!r} among {names}")


def op_group(inputs: Inputs) -> Reference:
    """Partition indexes of ``items`` by equal cells of ``keys``.

    Yields one data cell per distinct key, in first-occurrence order:
    ``{"key": <key cell>, "indexes": [...]}`` along a new ``group`` axis.
    """
    _expect("group", inputs, 2)
    (items_name, items), (keys_name, keys) = inputs
    if len(keys.axes) != 1:
        raise OperatorError("group", f"input {keys_name!r} must have exactly one axis")
    axis, length = keys.axes[0]
    if axis not in items.axis_names:
        raise OperatorError(
            "group", f"input {items_name!r} lacks the key axis {axis!r}"
        )
    if items.axis_length(axis) != length:
        raise OperatorError(
            "group",
            f"axis {axis!r} disagrees: {items.axis_length(axis)} items vs {length} keys",
        )
    order: list[bytes] = []
    buckets: dict[bytes, dict] = {}
    for i in range(length):
        cell = keys.cells[i]
        token = canonical_json_bytes(_cell_to_json(cell, for_digest=True))
        if token not in buckets:
            order.append(token)
            buckets[token] = {"key": cell, "indexes": []}
        buckets[token]["indexes"].append(i)
    groups = [buckets[t] for t in order]
    return Reference([("group", len(groups))], groups)


def op_collect(inputs: Inputs) -> Reference:
    """Pass a loop's stacked output through unchanged."""
    _expect("collect", inputs, 1)
    return inputs[0][1]


def op_extract(inputs: Inputs) -> Reference:
    """Pull one field out of every structured cell."""
    _expect("extract", inputs, 2)
    (src_name, src), (field_name, field_ref) = inputs
    key = _scalar_text("extract", field_name, field_ref)
    out = []
    for i, cell in enumerate(src.cells):
        if not isinstance(cell, dict):
            raise OperatorError(
                "extract", f"cell {i} of {src_name!r} is not structured data"
            )
        if key not in cell:
            raise OperatorError(
                "extract", f"cell {i} of {src_name!r} has no field {key!r}"
            )
        out.append(cell[key])
    return Reference(list(src.axes), out)


def op_load(inputs: Inputs) -> Reference:
    """Expose sign metadata as plain data, without fetching anything."""
    _expect("load", inputs, 1)
    name, ref = inputs[0]
    out = []
    for i, cell in enumerate(ref.cells):
        if not isinstance(cell, Sign):
            raise OperatorError("load", f"cell {i} of {name!r} is not a sign")
        out.append(
            {"sign_id": cell.sign_id, "uri": cell.uri, "media_type": cell.media_type}
        )
    return Reference(list(ref.axes), out)


def op_save(inputs: Inputs, outputs_dir: Optional[Path]) -> Reference:
    """Write the value to a relative path under the run's outputs directory."""
    _expect("save", inputs, 2)
    (_, value), (path_name, path_ref) = inputs
    rel = _scalar_text("save", path_name, path_ref)
    p = Path(rel)
    if p.is_absolute() or ".." in p.parts:
        raise OperatorError("save", f"path {rel!r} must stay inside the outputs directory")
    if outputs_dir is None:
        raise OperatorError("save", "no outputs directory configured")
    target = Path(outputs_dir) / p
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(value.canonical_bytes() + b"\n")
    return value


def op_wait(inputs: Inputs) -> Reference:
    """Ordering barrier: all inputs must be complete, first one passes through."""
    if not inputs:
        return scalar(None)
    return inputs[0][1]


_HANDLERS = {
    "route": op_route,
    "group": op_group,
    "collect": op_collect,
    "extract": op_extract,
    "load": op_load,
    "save": op_save,
    "wait": op_wait,
}
