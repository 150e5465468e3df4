"""Named-axis tensors of cell values, and signs (lazy pointers to resources).

A :class:`Reference` is the only value that moves between plan nodes and in
and out of checkpoints. Cells are plain JSON-shaped Python values or
:class:`Sign` pointers; a sign's content is fetched ("transmuted") only
inside semantic execution, never by syntactic operators.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass
from itertools import product as iter_product
from pathlib import Path
from typing import Any, Callable, Iterator, Optional, Sequence

from .errors import (
    DuplicateAxisError,
    IndexOutOfRangeError,
    ShapeMismatchError,
    UnknownAxisError,
    UnresolvableSignError,
)

REF_SCHEMA = "nc-ref/1"


@dataclass(frozen=True)
class Sign:
    """Compact pointer to an external resource.

    ``content_digest`` is the hash of the content seen at the most recent
    transmutation, when known; it never participates in Reference digests,
    so a Reference's identity does not drift as resources change.
    """

    sign_id: str
    uri: str
    media_type: str = "application/octet-stream"
    content_digest: Optional[str] = None

    @staticmethod
    def for_uri(uri: str, media_type: Optional[str] = None) -> "Sign":
        """Derive a sign with a stable id from its uri."""
        sid = "sign-" + hashlib.sha256(uri.encode("utf-8")).hexdigest()[:12]
        if media_type is None:
            media_type = _guess_media_type(uri)
        return Sign(sign_id=sid, uri=uri, media_type=media_type)


def _guess_media_type(uri: str) -> str:
    import mimetypes

    guessed, _ = mimetypes.guess_type(uri)
    return guessed or ("text/plain" if uri.startswith("prov://") else "application/octet-stream")


Cell = Any  # str | bool | int | float | dict | list | Sign


def _check_cell(value: Cell, *, top: bool = True) -> None:
    if isinstance(value, Sign):
        if not top:
            raise ValueError("signs may only appear as whole cells, not nested in data")
        return
    if isinstance(value, bool) or isinstance(value, str):
        return
    if isinstance(value, (int, float)):
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError("non-finite numbers are not valid cell values")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise ValueError("data cell keys must be strings")
            _check_cell(v, top=False)
        return
    if isinstance(value, (list, tuple)):
        for v in value:
            _check_cell(v, top=False)
        return
    if value is None:
        return
    raise ValueError(f"unsupported cell value of type {type(value).__name__}")


class Reference:
    """Dense named-axis tensor of cells, row-major, immutable once built."""

    __slots__ = ("axes", "cells")

    def __init__(self, axes: Sequence[tuple[str, int]], cells: Sequence[Cell]):
        axes = tuple((str(n), int(l)) for n, l in axes)
        names = [n for n, _ in axes]
        if len(set(names)) != len(names):
            raise DuplicateAxisError(f"duplicate axis names in {names}")
        for n, l in axes:
            if l < 0:
                raise ValueError(f"axis {n!r} has negative length")
        expected = 1
        for _, l in axes:
            expected *= l
        cells = tuple(cells)
        if len(cells) != expected:
            raise ShapeMismatchError(
                f"cell count {len(cells)} != product of axis lengths {expected}"
            )
        for c in cells:
            _check_cell(c)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "cells", cells)

    def __setattr__(self, name: str, value: Any) -> None:
        raise AttributeError("Reference is immutable")

    # -- identity ---------------------------------------------------------

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Reference)
            and self.axes == other.axes
            and self.cells == other.cells
        )

    def __hash__(self) -> int:
        return hash(self.digest())

    def __repr__(self) -> str:
        shape = ",".join(f"{n}={l}" for n, l in self.axes) or "scalar"
        return f"Reference({shape}, {len(self.cells)} cells)"

    # -- shape ------------------------------------------------------------

    @property
    def axis_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.axes)

    def axis_length(self, name: str) -> int:
        for n, l in self.axes:
            if n == name:
                return l
        raise UnknownAxisError(f"no axis named {name!r} (axes: {list(self.axis_names)})")

    def item(self) -> Cell:
        """The single cell of a scalar Reference."""
        if self.axes:
            raise ShapeMismatchError("item() requires a zero-axis Reference")
        return self.cells[0]

    def coords(self) -> Iterator[tuple[int, ...]]:
        """Row-major iteration over index tuples."""
        return iter_product(*(range(l) for _, l in self.axes))

    # -- ops ---------------------------------------------------------------

    def slice(self, axis_name: str, index: int) -> "Reference":
        """Drop one axis, keeping the hyperplane at ``index``."""
        pos = None
        for p, (n, _) in enumerate(self.axes):
            if n == axis_name:
                pos = p
                break
        if pos is None:
            raise UnknownAxisError(
                f"no axis named {axis_name!r} (axes: {list(self.axis_names)})"
            )
        length = self.axes[pos][1]
        if not 0 <= index < length:
            raise IndexOutOfRangeError(
                f"index {index} out of range for axis {axis_name!r} of length {length}"
            )
        lengths = [l for _, l in self.axes]
        strides = _row_major_strides(lengths)
        rest = [(p, l) for p, l in enumerate(lengths) if p != pos]
        out_cells = []
        for combo in iter_product(*(range(l) for _, l in rest)):
            flat = index * strides[pos]
            for (p, _), i in zip(rest, combo):
                flat += i * strides[p]
            out_cells.append(self.cells[flat])
        out_axes = [a for p, a in enumerate(self.axes) if p != pos]
        return Reference(out_axes, out_cells)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "schema": REF_SCHEMA,
            "axes": [[n, l] for n, l in self.axes],
            "cells": [_cell_to_json(c) for c in self.cells],
        }

    def canonical_bytes(self) -> bytes:
        return canonical_json_bytes(self.to_json())

    @staticmethod
    def from_json(data: dict) -> "Reference":
        if not isinstance(data, dict) or data.get("schema") != REF_SCHEMA:
            raise ValueError(f"not a {REF_SCHEMA} document")
        axes = [(a[0], a[1]) for a in data["axes"]]
        cells = [_cell_from_json(c) for c in data["cells"]]
        return Reference(axes, cells)

    @staticmethod
    def from_bytes(raw: bytes) -> "Reference":
        return Reference.from_json(json.loads(raw.decode("utf-8")))

    def digest(self) -> str:
        """Collision-resistant content hash; signs hash by (sign_id, uri) only."""
        doc = {
            "schema": REF_SCHEMA,
            "axes": [[n, l] for n, l in self.axes],
            "cells": [_cell_to_json(c, for_digest=True) for c in self.cells],
        }
        return hashlib.sha256(canonical_json_bytes(doc)).hexdigest()


def _row_major_strides(lengths: Sequence[int]) -> list[int]:
    strides = [1] * len(lengths)
    for p in range(len(lengths) - 2, -1, -1):
        strides[p] = strides[p + 1] * lengths[p + 1]
    return strides


def canonical_json_bytes(doc: Any) -> bytes:
    """One serialization per value: sorted keys, tight separators, UTF-8."""
    return json.dumps(
        doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def _cell_to_json(cell: Cell, *, for_digest: bool = False) -> dict:
    if isinstance(cell, Sign):
        if for_digest:
            return {"t": "sign", "v": {"sign_id": cell.sign_id, "uri": cell.uri}}
        v: dict[str, Any] = {
            "sign_id": cell.sign_id,
            "uri": cell.uri,
            "media_type": cell.media_type,
        }
        if cell.content_digest is not None:
            v["content_digest"] = cell.content_digest
        return {"t": "sign", "v": v}
    if isinstance(cell, bool):
        return {"t": "bool", "v": cell}
    if isinstance(cell, str):
        return {"t": "text", "v": cell}
    if isinstance(cell, (int, float)):
        return {"t": "num", "v": cell}
    return {"t": "data", "v": cell}


def _cell_from_json(doc: dict) -> Cell:
    t, v = doc["t"], doc.get("v")
    if t == "sign":
        return Sign(
            sign_id=v["sign_id"],
            uri=v["uri"],
            media_type=v.get("media_type", "application/octet-stream"),
            content_digest=v.get("content_digest"),
        )
    if t in ("text", "num", "bool", "data"):
        return v
    raise ValueError(f"unknown cell tag {t!r}")


# -- constructors -----------------------------------------------------------


def scalar(value: Cell) -> Reference:
    """Zero-axis Reference holding one cell."""
    return Reference((), (value,))


def stack(refs: Sequence[Reference], axis_name: str) -> Reference:
    """Stack equal-shaped References along a new leading axis.

    An empty input yields a zero-length axis with no cells; trailing shape
    is unknowable then, so the result is just ``[(axis_name, 0)]``.
    """
    refs = list(refs)
    if not refs:
        return Reference([(axis_name, 0)], [])
    first = refs[0].axes
    for r in refs[1:]:
        if r.axes != first:
            raise ShapeMismatchError(
                f"stack requires identical axes; got {first} vs {r.axes}"
            )
    if any(n == axis_name for n, _ in first):
        raise DuplicateAxisError(f"axis {axis_name!r} already present")
    cells: list[Cell] = []
    for r in refs:
        cells.extend(r.cells)
    return Reference([(axis_name, len(refs))] + list(first), cells)


def digest(ref: Reference) -> str:
    return ref.digest()


# -- signs and resolution ----------------------------------------------------


class Resolver:
    """Fetches sign content. Supports ``file://`` and ``prov://`` schemes.

    Counts every fetch so tests can assert that syntactic-only execution
    performs zero transmutations.
    """

    def __init__(
        self,
        provisions: Optional[dict[str, str]] = None,
        base_dir: Optional[Path] = None,
        extra_schemes: Optional[dict[str, Callable[[str], bytes]]] = None,
    ):
        self.provisions = dict(provisions or {})
        self.base_dir = Path(base_dir) if base_dir else None
        self.extra_schemes = dict(extra_schemes or {})
        self.calls = 0

    def fetch(self, uri: str) -> bytes:
        self.calls += 1
        if uri.startswith("prov://"):
            name = uri[len("prov://"):]
            if name not in self.provisions:
                raise UnresolvableSignError(uri, "no such provision")
            return self.provisions[name].encode("utf-8")
        if uri.startswith("file://"):
            path = Path(uri[len("file://"):])
            if self.base_dir is not None and not path.is_absolute():
                path = self.base_dir / path
            try:
                return path.read_bytes()
            except OSError as exc:
                raise UnresolvableSignError(uri, str(exc)) from exc
        scheme = uri.split("://", 1)[0] if "://" in uri else ""
        if scheme in self.extra_schemes:
            try:
                return self.extra_schemes[scheme](uri)
            except Exception as exc:
                raise UnresolvableSignError(uri, str(exc)) from exc
        raise UnresolvableSignError(uri, f"unsupported scheme {scheme!r}")


def transmute(sign: Sign, resolver: Resolver) -> tuple[Cell, str]:
    """Fetch a sign's content; returns (content cell, content digest).

    Text resources come back as text; anything undecodable is wrapped as
    base64 with its media type noted. Only semantic execution calls this.
    """
    raw = resolver.fetch(sign.uri)
    content_digest = hashlib.sha256(raw).hexdigest()
    try:
        content: Cell = raw.decode("utf-8")
    except UnicodeDecodeError:
        content = {
            "encoding": "base64",
            "media_type": sign.media_type,
            "data": base64.b64encode(raw).decode("ascii"),
        }
    return content, content_digest
