"""Column modality inference through a few-shot prompt."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from typing import Mapping

from .llm import prompts
from .llm.gateway import Gateway
from .llm.jsonx import STR_MAP, extract_strict_json
from .llm.prompts import PromptBundle, Purpose
from .table import Modality, StructuredTable

CELL_LIMIT = 80

_SYNONYMS = {
    Modality.NUMERICAL: ["numerical", "numeric", "number", "int", "integer", "float", "double",
                         "continuous", "real", "numerical data", "int64", "float64", "decimal"],
    Modality.CATEGORICAL: ["categorical", "category", "categories", "categorial", "bool", "boolean",
                           "binary", "class", "ordinal", "enum", "nominal", "label", "discrete"],
    Modality.TEXT: ["text", "string", "str", "free text", "sentence", "document", "textual",
                    "natural language", "description", "object"],
    Modality.IMAGE_PATH: ["image path", "image", "images", "image file", "image url", "photo",
                          "photo path", "picture", "img", "image paths", "picture path"],
    Modality.VIDEO_PATH: ["video path", "video", "videos", "video file", "clip", "movie", "video paths"],
    Modality.IDENTIFIER: ["identifier", "id", "key", "index", "uuid", "primary key"],
}
TAG_TABLE = {syn: m for m, syns in _SYNONYMS.items() for syn in syns}


class ModalityError(ValueError):
    pass


def normalize_tag(tag: str) -> Modality:
    """Map a free-form modality tag onto :class:`Modality`."""
    key = re.sub(r"[\s_\-/]+", " ", tag.strip().lower()).strip(" .")
    if key in TAG_TABLE:
        return TAG_TABLE[key]
    # "text (name)" or "categorical data"
    head = re.split(r"[(\[:,]", key)[0].strip()
    if head in TAG_TABLE:
        return TAG_TABLE[head]
    for suffix in (" data", " type", " column", " feature"):
        if head.endswith(suffix) and head[: -len(suffix)] in TAG_TABLE:
            return TAG_TABLE[head[: -len(suffix)]]
    raise ModalityError(f"unknown modality tag {tag!r}")


@dataclass(frozen=True)
class ModalitySchema:
    modalities: dict[str, Modality]
    provenance: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, column: str) -> Modality:
        return self.modalities[column]

    def __contains__(self, column):
        return column in self.modalities

    def __iter__(self):
        return iter(self.modalities)

    def __len__(self):
        return len(self.modalities)

    def columns_of(self, modality: Modality) -> list[str]:
        return [c for c, m in self.modalities.items() if m == modality]

    def feature_modalities(self, label_column: str | None) -> list[Modality]:
        """Distinct modalities of feature columns (identifiers excluded), canonical order."""
        present = {m for c, m in self.modalities.items() if c != label_column and m != Modality.IDENTIFIER}
        return [m for m in Modality if m in present]

    def restrict(self, columns) -> "ModalitySchema":
        cols = list(columns)
        return ModalitySchema({c: self.modalities[c] for c in cols},
                              {c: self.provenance.get(c, "llm") for c in cols})

    def to_json(self) -> dict:
        return {"modalities": {c: m.value for c, m in self.modalities.items()}, "provenance": dict(self.provenance)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModalitySchema":
        mods = {c: Modality(m) for c, m in doc["modalities"].items()}
        return cls(mods, dict(doc.get("provenance", {c: "llm" for c in mods})))


# Curated in-context examples. Each is (instructions, rows, answer).
FEW_SHOT = [
    (
        "Predict the price of second-hand cars.",
        [{"car_id": "C-1021", "brand": "Toyota", "mileage": "84500", "photo": "cars/1021.png", "price": "7300"},
         {"car_id": "C-1022", "brand": "Ford", "mileage": "120300", "photo": "cars/1022.png", "price": "4100"}],
        {"car_id": "identifier", "brand": "categorical", "mileage": "numerical", "photo": "image_path",
         "price": "numerical"},
    ),
    (
        "Detect sarcasm in social media posts.",
        [{"post": "Oh great, another Monday. Just what I needed.", "image": "posts/88.jpg", "sarcastic": "1"},
         {"post": "Lovely sunset at the beach today", "image": "posts/89.jpg", "sarcastic": "0"}],
        {"post": "text", "image": "image_path", "sarcastic": "categorical"},
    ),
    (
        "Classify the sentiment expressed in short interview clips.",
        [{"clip": "video/0001.mp4", "transcript": "I really did not expect that", "speaker_age": "34",
          "sentiment": "negative"},
         {"clip": "video/0002.mp4", "transcript": "That was wonderful", "speaker_age": "27",
          "sentiment": "positive"}],
        {"clip": "video_path", "transcript": "text", "speaker_age": "numerical", "sentiment": "categorical"},
    ),
]


def _clip(value: str) -> str:
    return value if len(value) <= CELL_LIMIT else value[:CELL_LIMIT]


def render_rows(rows: list[dict[str, str]]) -> str:
    return "\n".join("; ".join(f"{c}: {_clip(v)}" for c, v in row.items()) for row in rows)


def sample_row_indices(n_rows: int, sample_rows: int, seed: int) -> list[int]:
    return sorted(random.Random(seed).sample(range(n_rows), min(sample_rows, n_rows)))


def build_mi_prompt(table: StructuredTable, directive: str = "", sample_rows: int = 5, seed: int = 0,
                    n_examples: int = 3) -> PromptBundle:
    if table.n_rows == 0:
        raise ModalityError("cannot infer modalities of an empty table")
    if sample_rows < 1:
        raise ModalityError("sample_rows must be at least 1")
    blocks = []
    for desc, rows, answer in FEW_SHOT[:n_examples]:
        blocks.append((prompts.render(prompts.MODALITY_USER, desc=desc, data="\n" + render_rows(rows)),
                       json.dumps(answer)))
    examples = "\n\n".join(
        prompts.render(prompts.MODALITY_EXAMPLE, desc=desc, data="\n" + render_rows(rows), output=json.dumps(answer))
        for desc, rows, answer in FEW_SHOT[:n_examples]
    )
    system = prompts.render(prompts.MODALITY_SYSTEM, examples=examples)
    rows = [table.row(i) for i in sample_row_indices(table.n_rows, sample_rows, seed)]
    user = prompts.render(prompts.MODALITY_USER, desc=directive, data="\n" + render_rows(rows))
    return PromptBundle(Purpose.MODALITY, system, user, tuple(blocks))


def _parse_schema(text: str, columns: list[str]) -> dict[str, Modality]:
    raw = extract_strict_json(text, STR_MAP)
    missing = [c for c in columns if c not in raw]
    extra = [c for c in raw if c not in columns]
    if missing:
        raise ModalityError(f"answer omits column(s) {missing}")
    if extra:
        raise ModalityError(f"answer names unknown column(s) {extra}")
    return {c: normalize_tag(raw[c]) for c in columns}


def _corrective(exc: Exception) -> str:
    return (f"Your previous answer was invalid: {exc}. Answer with JSON only, covering every column exactly "
            f"once, using one of: {', '.join(m.value for m in Modality)}.")


def label_modality_for(task: str) -> Modality:
    return Modality.NUMERICAL if task == "regression" else Modality.CATEGORICAL


def infer_modalities(table: StructuredTable, directive: str, gateway: Gateway, *,
                     overrides: Mapping[str, str] | None = None, task: str | None = None,
                     sample_rows: int = 5, seed: int = 0) -> ModalitySchema:
    """Ask the model for a column -> modality map covering every column.

    Invalid answers (missing/extra columns, unknown tags) get one corrective
    retry. ``overrides`` win per column; a known ``task`` fixes the label's
    modality.
    """
    columns = list(table.columns)
    bundle = build_mi_prompt(table, directive, sample_rows, seed)
    text = gateway.complete(bundle).text
    try:
        mods = _parse_schema(text, columns)
    except ValueError as exc:
        text = gateway.complete(bundle.with_correction(_corrective(exc))).text
        mods = _parse_schema(text, columns)
    provenance = {c: "llm" for c in columns}
    for col, tag in (overrides or {}).items():
        if col not in mods:
            raise ModalityError(f"override for unknown column {col!r}")
        mods[col] = tag if isinstance(tag, Modality) else normalize_tag(tag)
        provenance[col] = "user_override"
    if task is not None and table.label_column is not None:
        want = label_modality_for(task)
        if mods[table.label_column] != want:
            mods[table.label_column] = want
            provenance[table.label_column] = "user_override"
    return ModalitySchema(mods, provenance)
