"""Structured tables: the raw-string grid that carries every modality.

Cells stay strings until modality inference has run. Image and video
columns hold relative file paths; the runtime resolves them against a data
root to sidecar feature files.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING = "???"

_PATH_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp", ".mp4", ".avi", ".mov", ".mkv")


class TableError(ValueError):
    pass


class Modality(str, enum.Enum):
    """Column modality tags, in canonical branch order."""

    NUMERICAL = "numerical"
    CATEGORICAL = "categorical"
    TEXT = "text"
    IMAGE_PATH = "image_path"
    VIDEO_PATH = "video_path"
    IDENTIFIER = "identifier"

    @classmethod
    def ordered(cls) -> list["Modality"]:
        return list(cls)

    @property
    def rank(self) -> int:
        return list(Modality).index(self)


PATH_MODALITIES = frozenset({Modality.IMAGE_PATH, Modality.VIDEO_PATH})
TABULAR_MODALITIES = frozenset({Modality.NUMERICAL, Modality.CATEGORICAL})


@dataclass(frozen=True)
class StructuredTable:
    columns: tuple[str, ...]
    cells: tuple[tuple[str, ...], ...]
    label_column: str | None = None
    source_path: str | None = None
    # pipeline stage marker: "raw" -> "filtered" -> "imputed"
    stage: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "cells", tuple(tuple(r) for r in self.cells))
        seen = set()
        for name in self.columns:
            if not name:
                raise TableError("empty column name")
            if name in seen:
                raise TableError(f"duplicate column name {name!r}")
            seen.add(name)
        width = len(self.columns)
        for i, row in enumerate(self.cells):
            if len(row) != width:
                raise TableError(f"ragged row {i}: {len(row)} cells, expected {width}")
            for cell in row:
                if not isinstance(cell, str):
                    raise TableError(f"row {i}: non-string cell {cell!r}")
        if self.label_column is not None and self.label_column not in seen:
            raise TableError(f"label column {self.label_column!r} not in columns")

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    @property
    def feature_columns(self) -> list[str]:
        return [c for c in self.columns if c != self.label_column]

    def index(self, column: str) -> int:
        try:
            return self.columns.index(column)
        except ValueError:
            raise KeyError(column) from None

    def column(self, name: str) -> list[str]:
        j = self.index(name)
        return [row[j] for row in self.cells]

    def row(self, i: int) -> dict[str, str]:
        return dict(zip(self.columns, self.cells[i]))

    def select_columns(self, names: Sequence[str]) -> "StructuredTable":
        idx = [self.index(n) for n in names]
        label = self.label_column if self.label_column in names else None
        return replace(
            self,
            columns=tuple(names),
            cells=tuple(tuple(row[j] for j in idx) for row in self.cells),
            label_column=label,
        )

    def with_stage(self, stage: str) -> "StructuredTable":
        return replace(self, stage=stage)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(self.cells)
        return buf.getvalue()


def load_table(path, label_column: str | None = None) -> StructuredTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"table file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TableError("no header")
    header, body = rows[0], rows[1:]
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise TableError(f"ragged row {i}: {len(row)} cells, expected {len(header)}")
    return StructuredTable(
        columns=tuple(header), cells=tuple(map(tuple, body)),
        label_column=label_column, source_path=str(path),
    )


def save_table(table: StructuredTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.to_csv(), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Synthetic multimodal dataset
# ---------------------------------------------------------------------------

SYNTHETIC_LABEL = "adopted"
SYNTHETIC_IMAGE_DIM = 8
# gender level -> age offset in the labelling rule
_GENDER_OFFSET = {"1": -25, "2": 0, "3": 25}

_NAMES = ["Coco", "Muffin", "Usyang", "Bella", "Milo", "Luna", "Oreo", "Tiger", "Mochi", "Pepper"]
_ADJECTIVES = ["playful", "shy", "gentle", "curious", "sleepy", "friendly", "calm", "energetic"]
_SPECIES = ["puppy", "kitten", "cat", "dog", "rabbit"]
_HOBBIES = ["chasing balls", "long naps", "belly rubs", "garden walks", "climbing shelves", "treats"]


def synthetic_rule(age: float, gender: str) -> int:
    """The labelling rule of the synthetic dataset."""
    return int(age + _GENDER_OFFSET[gender] > 50)


def synthetic_schema() -> dict[str, Modality]:
    return {
        "age": Modality.NUMERICAL,
        "gender": Modality.CATEGORICAL,
        "description": Modality.TEXT,
        "images": Modality.IMAGE_PATH,
        SYNTHETIC_LABEL: Modality.CATEGORICAL,
    }


def synthetic_image_features(n_rows: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1])
    return rng.normal(size=(n_rows, SYNTHETIC_IMAGE_DIM))


def generate_synthetic_dataset(n_rows: int, seed: int, sidecar_dir=None) -> StructuredTable:
    """Build a separable four-modality table with a binary label.

    ``adopted`` is ``synthetic_rule(age, gender)``. When ``sidecar_dir`` is
    given, one feature file per ``images`` cell is written below it.
    """
    if n_rows < 2:
        raise TableError("n_rows must be at least 2")
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_rows):
        age = int(rng.integers(0, 101))
        gender = str(int(rng.integers(1, 4)))
        name = _NAMES[int(rng.integers(len(_NAMES)))]
        desc = (f"{name} is a {_ADJECTIVES[int(rng.integers(len(_ADJECTIVES)))]} "
                f"{_SPECIES[int(rng.integers(len(_SPECIES)))]}, loves "
                f"{_HOBBIES[int(rng.integers(len(_HOBBIES)))]}")
        image = f"images/pet_{i:05d}.jpg"
        rows.append((str(age), gender, desc, image, str(synthetic_rule(age, gender))))
    table = StructuredTable(
        columns=("age", "gender", "description", "images", SYNTHETIC_LABEL),
        cells=tuple(rows),
        label_column=SYNTHETIC_LABEL,
    )
    if sidecar_dir is not None:
        write_sidecars(table, sidecar_dir, synthetic_image_features(n_rows, seed))
    return table


def write_sidecars(table: StructuredTable, root, features: np.ndarray, column: str = "images") -> None:
    root = Path(root)
    for cell, vec in zip(table.column(column), features):
        target = root / cell
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(" ".join(repr(float(v)) for v in vec) + "\n")


# ---------------------------------------------------------------------------
# Corruption harness
# ---------------------------------------------------------------------------

NOISE_GENERATORS = ("random_int", "color_word", "lorem")
_NOISE_NAMES = {"random_int": "lucky_number", "color_word": "favorite_color", "lorem": "memo"}
_COLORS = ["red", "green", "blue", "yellow", "purple", "orange", "black", "white"]
_LOREM = ["lorem ipsum", "dolor sit amet", "consectetur adipiscing", "sed do eiusmod",
          "tempor incididunt", "ut labore et dolore", "magna aliqua"]


@dataclass(frozen=True)
class CorruptionPlan:
    mask_fraction: float
    masked_positions: tuple[tuple[int, str], ...]
    noise_columns: tuple[tuple[str, str], ...]
    seed: int

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "mask_fraction": self.mask_fraction,
            "masked": [[r, c] for r, c in self.masked_positions],
            "noise": [{"name": n, "generator": g} for n, g in self.noise_columns],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "CorruptionPlan":
        return cls(
            mask_fraction=float(doc["mask_fraction"]),
            masked_positions=tuple((int(r), str(c)) for r, c in doc["masked"]),
            noise_columns=tuple((d["name"], d["generator"]) for d in doc["noise"]),
            seed=int(doc["seed"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _looks_like_path(values: Iterable[str]) -> bool:
    values = [v for v in values if v != MISSING]
    return bool(values) and all(v.lower().endswith(_PATH_SUFFIXES) for v in values)


def _noise_values(tag: str, n: int, rng: np.random.Generator) -> list[str]:
    if tag == "random_int":
        return [str(int(v)) for v in rng.integers(0, 10, size=n)]
    if tag == "color_word":
        return [_COLORS[int(i)] for i in rng.permutation(np.arange(n) % len(_COLORS))]
    if tag == "lorem":
        return [" ".join(_LOREM[int(i)] for i in rng.integers(len(_LOREM), size=2)) for _ in range(n)]
    raise ValueError(f"unknown noise generator {tag!r}")


def maskable_columns(table: StructuredTable, modalities: Mapping[str, Modality] | None = None) -> list[str]:
    """Columns the harness may mask: never the label, paths, or identifiers."""
    out = []
    for name in table.feature_columns:
        if modalities is not None and name in modalities:
            if Modality(modalities[name]) in PATH_MODALITIES | {Modality.IDENTIFIER}:
                continue
        elif _looks_like_path(table.column(name)):
            continue
        out.append(name)
    return out


def corrupt(table: StructuredTable, mask_fraction: float, noise_column_count: int, seed: int,
            modalities: Mapping[str, Modality] | None = None) -> tuple[StructuredTable, CorruptionPlan]:
    """Mask a fraction of each eligible column with ``???`` and append noise columns.

    Each eligible column gets exactly ``round(mask_fraction * n_rows)`` masked
    cells. Without ``modalities``, path columns are recognised by file suffix.
    """
    if not 0.0 <= mask_fraction <= 1.0 or math.isnan(mask_fraction):
        raise TableError(f"mask_fraction must lie in [0, 1], got {mask_fraction}")
    if noise_column_count < 0:
        raise TableError("noise_column_count must be non-negative")
    rng = np.random.default_rng(seed)
    n = table.n_rows
    per_column = int(math.floor(mask_fraction * n + 0.5 + 1e-9))
    grid = [list(r) for r in table.cells]
    masked = []
    for name in maskable_columns(table, modalities):
        j = table.index(name)
        for r in sorted(int(i) for i in rng.choice(n, size=per_column, replace=False)):
            grid[r][j] = MISSING
            masked.append((r, name))
    masked.sort(key=lambda p: (p[0], table.index(p[1])))

    columns = list(table.columns)
    noise = []
    for k in range(noise_column_count):
        tag = NOISE_GENERATORS[k % len(NOISE_GENERATORS)]
        base = _NOISE_NAMES[tag]
        name = base if k < len(NOISE_GENERATORS) else f"{base}_{k // len(NOISE_GENERATORS)}"
        while name in columns:
            name += "_x"
        values = _noise_values(tag, n, rng)
        for r in range(n):
            grid[r].append(values[r])
        columns.append(name)
        noise.append((name, tag))

    out = replace(table, columns=tuple(columns), cells=tuple(map(tuple, grid)))
    plan = CorruptionPlan(mask_fraction=float(mask_fraction), masked_positions=tuple(masked),
                          noise_columns=tuple(noise), seed=seed)
    return out, plan
