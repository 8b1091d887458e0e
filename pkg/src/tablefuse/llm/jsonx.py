"""Pull one strict JSON document out of a chatty model reply and check its shape."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any


class JSONExtractionError(ValueError):
    """No JSON, unparsable JSON, or JSON of the wrong shape."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class Shape:
    """Minimal shape descriptor.

    kind is one of ``"str_map"`` (flat string -> string), ``"record"``
    (object with the listed string ``fields``), ``"str_list"``, or
    ``"any_map"`` (object with arbitrary values).
    """

    kind: str
    fields: tuple[str, ...] = ()


STR_MAP = Shape("str_map")
STR_LIST = Shape("str_list")
ANY_MAP = Shape("any_map")
NAME_REASON = Shape("record", ("name", "reason"))

_decoder = json.JSONDecoder()


def find_json(text: str, openers: str = "{[") -> Any:
    """Return the first well-formed JSON document starting with one of ``openers``."""
    saw_opener = False
    last_error = None
    for start in (i for i, ch in enumerate(text) if ch in openers):
        saw_opener = True
        try:
            doc, _ = _decoder.raw_decode(text, start)
        except json.JSONDecodeError as exc:
            last_error = exc
            continue
        return doc
    if not saw_opener:
        raise JSONExtractionError("no JSON found in response")
    raise JSONExtractionError(f"JSON parse failure: {last_error}")


def check_shape(doc: Any, shape: Shape) -> Any:
    if shape.kind == "str_map":
        if not isinstance(doc, dict):
            raise JSONExtractionError(f"expected a JSON object, got {type(doc).__name__}")
        for k, v in doc.items():
            if not isinstance(v, str):
                raise JSONExtractionError(f"value of {k!r} must be a string", key=k)
        return doc
    if shape.kind == "any_map":
        if not isinstance(doc, dict):
            raise JSONExtractionError(f"expected a JSON object, got {type(doc).__name__}")
        return doc
    if shape.kind == "record":
        if not isinstance(doc, dict):
            raise JSONExtractionError(f"expected a JSON object, got {type(doc).__name__}")
        for name in shape.fields:
            if name not in doc:
                raise JSONExtractionError(f"missing key {name!r}", key=name)
            if not isinstance(doc[name], str):
                raise JSONExtractionError(f"key {name!r} must be a string", key=name)
        return doc
    if shape.kind == "str_list":
        if not isinstance(doc, list):
            raise JSONExtractionError(f"expected a JSON array, got {type(doc).__name__}")
        for i, v in enumerate(doc):
            if not isinstance(v, str):
                raise JSONExtractionError(f"element {i} must be a string", key=str(i))
        return doc
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def extract_strict_json(text: str, expected_shape: Shape) -> Any:
    openers = "[" if expected_shape.kind == "str_list" else "{"
    return check_shape(find_json(text, openers), expected_shape)
