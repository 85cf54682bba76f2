"""Flat key=value text archive used for worlds, episodes and weights.

Layout::

    # hallucdet-kv 1 <kind>
    key=value

Arrays are stored as ``key=@shape;v0 v1 ...`` using ``repr`` floats, which
round-trip float64 exactly. Lines are written in insertion order so the same
object always produces the same bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import numpy as np

VERSION = 1
MAGIC = "# hallucdet-kv"


class FormatError(ValueError):
    pass


def _encode(value: Any) -> str:
    if isinstance(value, np.ndarray):
        shape = ",".join(str(n) for n in value.shape)
        if value.dtype.kind in "iub":
            body = " ".join(str(int(v)) for v in value.ravel())
            return f"@i{shape};{body}"
        body = " ".join(repr(float(v)) for v in value.ravel())
        return f"@f{shape};{body}"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if "\n" in text:
        raise FormatError("values may not contain newlines")
    return text


def _decode(text: str) -> Any:
    if text.startswith("@") and ";" in text:
        head, body = text[1:].split(";", 1)
        kind, shape_text = head[0], head[1:]
        shape = tuple(int(n) for n in shape_text.split(",")) if shape_text else ()
        try:
            if kind == "i":
                flat = np.array([int(v) for v in body.split()], dtype=np.int64)
            else:
                flat = np.array([float(v) for v in body.split()], dtype=np.float64)
            return flat.reshape(shape)
        except ValueError as exc:
            raise FormatError(f"bad array value: {exc}") from None
    return text


def dumps(kind: str, fields: Mapping[str, Any]) -> str:
    lines = [f"{MAGIC} {VERSION} {kind}"]
    for key, value in fields.items():
        if "=" in key or not key:
            raise FormatError(f"bad key {key!r}")
        lines.append(f"{key}={_encode(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str, expect_kind: str | None = None) -> tuple[str, dict[str, Any]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise FormatError("missing hallucdet-kv header")
    parts = lines[0].split()
    if len(parts) != 4 or parts[2] != str(VERSION):
        raise FormatError(f"unsupported header {lines[0]!r}")
    kind = parts[3]
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind} archive, got {kind}")
    fields: dict[str, Any] = {}
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: no '=' in {line[:40]!r}")
        key, value = line.split("=", 1)
        fields[key] = _decode(value)
    return kind, fields


def save(path: str | Path, kind: str, fields: Mapping[str, Any]) -> None:
    Path(path).write_text(dumps(kind, fields), encoding="utf-8")


def load(path: str | Path, expect_kind: str | None = None) -> tuple[str, dict[str, Any]]:
    return loads(Path(path).read_text(encoding="utf-8"), expect_kind)
