"""Versioned JSON documents for trained models.

Every model file is one JSON object::

    {
      "format_version": 1,
      "kind": "mieo" | "classifier",
      ...model fields...
    }

Floats are written with ``repr`` precision, so loading gives back every
parameter and running statistic bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

from .exceptions import MieoValidationError

FORMAT_VERSION = 1


def dumps(kind: str, body: Mapping[str, Any]) -> str:
    document = {"format_version": FORMAT_VERSION, "kind": kind, **body}
    return json.dumps(document, indent=1, sort_keys=True) + "\n"


def save_document(path: str | Path, kind: str, body: Mapping[str, Any]) -> None:
    Path(path).write_text(dumps(kind, body), encoding="utf-8")


def load_document(path: str | Path, kind: str) -> dict[str, Any]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise MieoValidationError(f"{path} is not a JSON model file: {err}") from err

    if not isinstance(document, dict):
        raise MieoValidationError(f"{path} is not a JSON model file.")
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise MieoValidationError(
            f"{path} has model format version {version!r}; "
            f"this release reads version {FORMAT_VERSION}."
        )
    if document.get("kind") != kind:
        raise MieoValidationError(
            f"{path} holds a {document.get('kind')!r} model, expected {kind!r}."
        )
    return document
