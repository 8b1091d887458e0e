"""LLM feature engineering: column filtering, then per-cell imputation."""

from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .llm import prompts
from .llm.gateway import Gateway, GatewayError
from .llm.jsonx import STR_LIST, extract_strict_json
from .llm.prompts import PromptBundle, Purpose
from .modality import CELL_LIMIT, ModalitySchema
from .table import MISSING, Modality, StructuredTable

log = logging.getLogger(__name__)

IMPUTABLE = (Modality.NUMERICAL, Modality.CATEGORICAL, Modality.TEXT)


class FeatureEngineeringError(ValueError):
    pass


class PipelineOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterResult:
    retained: tuple[str, ...]
    dropped: tuple[str, ...]
    reinstated: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"retained": list(self.retained), "dropped": list(self.dropped), "reinstated": list(self.reinstated)}


@dataclass
class ImputationReport:
    filled: list[tuple[int, str, str]] = field(default_factory=list)
    unresolved: list[tuple[int, str, str]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"filled": [list(t) for t in self.filled], "unresolved": [list(t) for t in self.unresolved]}


FILTER_EXAMPLES = [
    (
        "Predict whether a loan applicant defaults.",
        {"age": "numerical", "over_50": "categorical", "income": "numerical", "zodiac_sign": "categorical",
         "defaulted": "categorical"},
        ["age", "over_50", "income", "zodiac_sign"],
        ["age", "income"],
    ),
    (
        "Estimate how popular a pet photo will be.",
        {"photo": "image_path", "eyes": "categorical", "blur": "categorical", "uploader_shoe_size": "numerical"},
        ["photo", "eyes", "blur", "uploader_shoe_size"],
        ["photo", "eyes", "blur"],
    ),
]


def build_filter_prompt(features: list[str], schema: ModalitySchema, directive: str) -> PromptBundle:
    blocks, examples = [], []
    for task, types, feats, kept in FILTER_EXAMPLES:
        example_types = {f: types[f] for f in feats}
        blocks.append((prompts.render(prompts.FILTER_USER, task=task, feature_type=json.dumps(example_types),
                                      features=json.dumps(feats)), json.dumps(kept)))
        examples.append(prompts.render(prompts.FILTER_EXAMPLE, task=task, feature_type=json.dumps(example_types),
                                       features=json.dumps(feats), retained=json.dumps(kept)))
    system = prompts.render(prompts.FILTER_SYSTEM, examples="\n\n".join(examples))
    types = {f: schema[f].value for f in features}
    user = prompts.render(prompts.FILTER_USER, task=directive, feature_type=json.dumps(types),
                          features=json.dumps(features))
    return PromptBundle(Purpose.FILTER, system, user, tuple(blocks))


def _parse_retained(text: str, features: list[str]) -> list[str]:
    names = extract_strict_json(text, STR_LIST)
    forged = [n for n in names if n not in features]
    if forged:
        raise FeatureEngineeringError(f"forged feature name(s) not in the input: {forged}")
    return names


def filter_features(table: StructuredTable, schema: ModalitySchema, directive: str,
                    gateway: Gateway) -> FilterResult:
    """Ask which feature columns to keep; the label is never a candidate.

    Forged names get one corrective retry. Dropped image columns are put back.
    """
    missing = [c for c in table.columns if c not in schema]
    if missing:
        raise FeatureEngineeringError(f"schema does not cover column(s) {missing}")
    features = table.feature_columns
    bundle = build_filter_prompt(features, schema, directive)
    text = gateway.complete(bundle).text
    try:
        kept = _parse_retained(text, features)
    except ValueError as exc:
        note = f"Your previous answer was invalid: {exc}. Answer with a JSON list of input feature names only."
        kept = _parse_retained(gateway.complete(bundle.with_correction(note)).text, features)
    kept_set = set(kept)
    reinstated = [f for f in features if schema[f] == Modality.IMAGE_PATH and f not in kept_set]
    kept_set.update(reinstated)
    retained = [f for f in features if f in kept_set]
    if not retained:
        raise FeatureEngineeringError("filter retained no features")
    dropped = [f for f in features if f not in kept_set]
    return FilterResult(tuple(retained), tuple(dropped), tuple(reinstated))


def apply_filter(table: StructuredTable, result: FilterResult) -> StructuredTable:
    keep = list(result.retained)
    if table.label_column is not None:
        keep.append(table.label_column)
    keep = [c for c in table.columns if c in set(keep)]
    return table.select_columns(keep).with_stage("filtered")


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------

def render_sequence(row: dict[str, str], mask: str | None = None, target: str | None = None) -> str:
    """``col: val`` pairs. With ``target`` set, other missing cells are left out
    so the sequence carries exactly one ``???``."""
    parts = []
    for col, val in row.items():
        if target is not None and col != target and val == MISSING:
            continue
        val = MISSING if col == mask else val
        parts.append(f"{col}: {val if len(val) <= CELL_LIMIT else val[:CELL_LIMIT]}")
    return ", ".join(parts)


def _complete_rows(table: StructuredTable) -> list[int]:
    return [i for i, row in enumerate(table.cells) if not any(MISSING in c for c in row)]


def build_impute_examples(table: StructuredTable, k: int, seed: int,
                          columns: list[str] | None = None) -> list[tuple[str, str]]:
    """Mask one attribute in each of ``k`` complete rows: (masked sequence, answer) pairs."""
    if k == 0:
        return []
    complete = _complete_rows(table)
    if len(complete) < k:
        raise FeatureEngineeringError(f"need {k} complete rows for imputation examples, found {len(complete)}")
    columns = list(columns) if columns is not None else table.feature_columns
    if not columns:
        raise FeatureEngineeringError("no columns eligible for imputation examples")
    rng = random.Random(seed)
    pairs = []
    for i in sorted(rng.sample(complete, k)):
        col = rng.choice(columns)
        row = table.row(i)
        pairs.append((render_sequence(row, mask=col), row[col]))
    return pairs


def build_impute_prompt(examples: list[tuple[str, str]], sequence: str, directive: str) -> PromptBundle:
    text = "\n\n".join(prompts.render(prompts.IMPUTE_EXAMPLE, task=directive, sequence=seq, value=ans)
                       for seq, ans in examples)
    system = prompts.render(prompts.IMPUTE_SYSTEM, examples=text)
    blocks = tuple((prompts.render(prompts.IMPUTE_USER, task=directive, sequence=s), a) for s, a in examples)
    user = prompts.render(prompts.IMPUTE_USER, task=directive, sequence=sequence)
    return PromptBundle(Purpose.IMPUTE, system, user, blocks)


_NUMBER = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def parse_bare_value(text: str) -> str:
    """Strip fences, an ``Output:`` prefix, and quotes from a one-value reply."""
    text = text.strip()
    text = re.sub(r"^```[a-zA-Z]*\s*|\s*```$", "", text).strip()
    text = text.splitlines()[0].strip() if text else ""
    text = re.sub(r"^(output|answer)\s*:\s*", "", text, flags=re.I).strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text


def _numeric_bounds(values: list[str]) -> tuple[float, float] | None:
    nums = [float(v) for v in values if _NUMBER.match(v.strip())]
    if not nums:
        return None
    lo, hi = min(nums), max(nums)
    span = hi - lo if hi > lo else max(abs(hi), 1.0)
    return lo - 10 * span, hi + 10 * span


def coerce(value: str, modality: Modality, observed: list[str]) -> tuple[str | None, str]:
    """Validate an imputed value; returns (value or None, failure reason)."""
    if not value:
        return None, "empty answer"
    if modality == Modality.NUMERICAL:
        if not _NUMBER.match(value):
            return None, "not a number"
        bounds = _numeric_bounds(observed)
        if bounds is not None and not bounds[0] <= float(value) <= bounds[1]:
            return None, "out of range"
        return value, ""
    if modality == Modality.CATEGORICAL:
        if value not in set(observed):
            return None, "level not observed"
        return value, ""
    return value, ""


def impute_table(table: StructuredTable, schema: ModalitySchema, directive: str, gateway: Gateway, *,
                 n_examples: int = 3, seed: int = 0, max_in_flight: int = 4,
                 ) -> tuple[StructuredTable, ImputationReport]:
    """Fill every ``???`` cell in retained numerical/categorical/text columns.

    One completion per cell. Per-cell failures land in ``unresolved``; nothing
    here raises for a bad answer.
    """
    if table.stage != "filtered":
        raise PipelineOrderError("impute_table requires a filtered table; run filter_features/apply_filter first")
    targets = [c for c in table.feature_columns if schema[c] in IMPUTABLE]
    holes = [(i, c) for i, row in enumerate(table.cells) for c in targets if row[table.index(c)] == MISSING]
    report = ImputationReport()
    if not holes:
        return table.with_stage("imputed"), report

    tabular = [c for c in targets if schema[c] in (Modality.NUMERICAL, Modality.CATEGORICAL)] or targets
    complete = len(_complete_rows(table))
    examples = build_impute_examples(table, min(n_examples, complete), seed, columns=tabular) if complete else []
    observed = {c: [v for v in table.column(c) if v != MISSING] for c in targets}

    def one(hole):
        i, col = hole
        bundle = build_impute_prompt(examples, render_sequence(table.row(i), target=col), directive)
        try:
            value = parse_bare_value(gateway.complete(bundle).text)
        except GatewayError as exc:
            return hole, None, f"llm error: {exc}"
        coerced, reason = coerce(value, schema[col], observed[col])
        return hole, coerced, reason

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        results = list(pool.map(one, holes))

    grid = [list(r) for r in table.cells]
    for (i, col), value, reason in sorted(results, key=lambda r: (r[0][0], table.index(r[0][1]))):
        if value is None:
            report.unresolved.append((i, col, reason))
        else:
            grid[i][table.index(col)] = value
            report.filled.append((i, col, value))
    out = StructuredTable(table.columns, tuple(map(tuple, grid)), table.label_column, table.source_path, "imputed")
    return out, report


def engineering_report(result: FilterResult, report: ImputationReport) -> dict:
    return {**result.to_json(), **report.to_json()}
