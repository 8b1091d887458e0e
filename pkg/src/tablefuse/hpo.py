"""LLM-proposed search spaces and a native random/grid search executor."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from numbers import Number
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .llm import prompts
from .llm.gateway import Gateway
from .llm.jsonx import ANY_MAP, STR_MAP, extract_strict_json
from .llm.prompts import PromptBundle, Purpose
from .runtime import RuntimeFailure, TrainConfig, higher_is_better

log = logging.getLogger(__name__)

MAX_PARAMS = 3
MIN_NUMERIC_VALUES = 3
PLACEHOLDER_DESCRIPTION = "No description available."


class SearchSpaceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Descriptions
# ---------------------------------------------------------------------------

def _config_text(config: Mapping) -> str:
    return json.dumps(dict(config), sort_keys=True)


def describe_hyperparameters(config: Mapping, gateway: Gateway) -> tuple[dict[str, str], list[str]]:
    """One description per config key; returns (descriptions, names left to placeholders)."""
    if not config:
        raise SearchSpaceError("config is empty")
    system = prompts.render(prompts.HPO_DESCRIBE_SYSTEM)
    user = prompts.render(prompts.HPO_DESCRIBE_USER, config=_config_text(config))
    text = gateway.complete(PromptBundle(Purpose.HPO_DESCRIBE, system, user)).text
    try:
        answer = extract_strict_json(text, STR_MAP)
    except ValueError as exc:
        log.warning("hyperparameter descriptions unparsable (%s); using placeholders", exc)
        answer = {}
    out, missing = {}, []
    for name in config:
        if name in answer:
            out[name] = answer[name]
        else:
            out[name] = PLACEHOLDER_DESCRIPTION
            missing.append(name)
    if missing:
        log.warning("no description returned for %s", missing)
    return out, missing


# ---------------------------------------------------------------------------
# Search space
# ---------------------------------------------------------------------------

def _is_numeric(value) -> bool:
    return isinstance(value, Number) and not isinstance(value, bool)


def _scalar(token: str):
    token = token.strip()
    if not token:
        raise SearchSpaceError("empty value in search range")
    try:
        return json.loads(token)
    except json.JSONDecodeError:
        pass
    try:
        return float(token)
    except ValueError:
        return token.strip("'\"")


def parse_range(raw) -> tuple:
    """Discrete range from a JSON array or a ``"[v1, v2, v3]"`` string."""
    if isinstance(raw, list):
        values = raw
    elif isinstance(raw, str):
        text = raw.strip()
        if not (text.startswith("[") and text.endswith("]")):
            raise SearchSpaceError(f"range {raw!r} is not a discrete [v1,v2,...] list")
        try:
            values = json.loads(text)
        except json.JSONDecodeError:
            inner = text[1:-1].strip()
            values = [_scalar(t) for t in inner.split(",")] if inner else []
    else:
        raise SearchSpaceError(f"range {raw!r} is not a discrete list")
    if not values:
        raise SearchSpaceError("search range is empty")
    for v in values:
        if isinstance(v, (list, dict)):
            raise SearchSpaceError(f"nested value {v!r} in search range")
    return tuple(v for v in values)


def _contains(values: tuple, original) -> bool:
    for v in values:
        if _is_numeric(v) and _is_numeric(original):
            if math.isclose(float(v), float(original), rel_tol=1e-9, abs_tol=1e-12):
                return True
        elif v == original:
            return True
    return False


@dataclass(frozen=True)
class HPOSpace:
    ranges: dict[str, tuple]

    def __len__(self):
        return len(self.ranges)

    def names(self) -> list[str]:
        return list(self.ranges)

    def grid_size(self) -> int:
        return math.prod(len(v) for v in self.ranges.values()) if self.ranges else 0

    def to_json(self) -> dict:
        return {k: list(v) for k, v in self.ranges.items()}

    @classmethod
    def from_json(cls, doc: Mapping) -> "HPOSpace":
        return cls({k: tuple(v) for k, v in doc.items()})


def validate_space(ranges: Mapping[str, tuple], config: Mapping) -> HPOSpace:
    """Enforce the search-space rules; each error names the rule broken."""
    if len(ranges) > MAX_PARAMS:
        raise SearchSpaceError(f"rule (choose up to 3): {len(ranges)} hyperparameters proposed")
    forged = [k for k in ranges if k not in config]
    if forged:
        raise SearchSpaceError(f"rule (no forged parameters): {forged} not in the configuration")
    if "checkpoint_name" in config:
        extra = [k for k in ranges if k != "loss_weight"]
        if extra:
            raise SearchSpaceError(f"rule (checkpoint_name present -> only loss_weight): got {extra}")
    for name, values in ranges.items():
        original = config[name]
        if _is_numeric(original):
            if not all(_is_numeric(v) for v in values):
                raise SearchSpaceError(f"rule (numeric ranges): {name} range {list(values)} is not all numbers")
            if len(values) < MIN_NUMERIC_VALUES:
                raise SearchSpaceError(f"rule (at least 3 values): {name} range has {len(values)}")
        if not _contains(values, original):
            raise SearchSpaceError(f"rule (include original value): {name} range {list(values)} "
                                   f"lacks the original {original!r}")
    return HPOSpace({k: tuple(v) for k, v in ranges.items()})


def build_hpo_prompt(config: Mapping, descriptions: Mapping[str, str], directive: str) -> PromptBundle:
    system = prompts.render(prompts.HPO_SPACE_SYSTEM)
    user = prompts.render(prompts.HPO_SPACE_USER, descriptions=json.dumps(dict(descriptions), sort_keys=True),
                          config=_config_text(config), requirements=directive)
    return PromptBundle(Purpose.HPO_SPACE, system, user)


def _parse_space(text: str, config: Mapping) -> HPOSpace:
    doc = extract_strict_json(text, ANY_MAP)
    return validate_space({k: parse_range(v) for k, v in doc.items()}, config)


def propose_search_space(config: Mapping, descriptions: Mapping[str, str], directive: str,
                         gateway: Gateway) -> HPOSpace:
    if not config:
        raise SearchSpaceError("config is empty")
    bundle = build_hpo_prompt(config, descriptions, directive)
    try:
        return _parse_space(gateway.complete(bundle).text, config)
    except ValueError as exc:
        note = f"Your previous answer was invalid: {exc}. Fix it and answer with JSON only."
        return _parse_space(gateway.complete(bundle.with_correction(note)).text, config)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialRecord:
    index: int
    assignment: dict
    metric: float
    diverged: bool = False

    def rank_key(self, maximize: bool) -> tuple:
        return (-self.metric if maximize else self.metric, self.index)


@dataclass
class SearchResult:
    best: TrialRecord
    records: list[TrialRecord]
    metric: str
    maximize: bool
    empty_space: bool = False


def _assignments(space: HPOSpace, trials: int, strategy: str, seed: int) -> list[dict]:
    names = space.names()
    if strategy == "grid":
        return [dict(zip(names, combo)) for combo in itertools.product(*(space.ranges[n] for n in names))]
    if strategy == "random":
        if trials < 1:
            raise SearchSpaceError("random search needs at least one trial")
        rng = np.random.default_rng(seed)
        return [{n: space.ranges[n][int(rng.integers(len(space.ranges[n])))] for n in names}
                for _ in range(trials)]
    raise SearchSpaceError(f"unknown search strategy {strategy!r}")


def run_search(space: HPOSpace, base_config: TrainConfig, objective: Callable[[TrainConfig], float], *,
               metric: str, trials: int = 8, strategy: str = "random", seed: int = 0,
               parallelism: int = 1) -> SearchResult:
    """Overlay each assignment on ``base_config`` and score it with ``objective``.

    Diverged trials (``RuntimeFailure`` from training) score worst instead of
    stopping the sweep. Ties go to the earliest trial.
    """
    maximize = higher_is_better(metric)
    worst = -math.inf if maximize else math.inf
    empty = len(space) == 0
    assignments = [{}] if empty else _assignments(space, trials, strategy, seed)

    def run(item):
        index, assignment = item
        try:
            value = float(objective(base_config.overlay(assignment)))
        except RuntimeFailure as exc:
            log.warning("trial %d failed: %s", index, exc)
            return TrialRecord(index, assignment, worst, diverged=True)
        if not math.isfinite(value):
            return TrialRecord(index, assignment, worst, diverged=True)
        return TrialRecord(index, assignment, value)

    items = list(enumerate(assignments))
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(run, items))
    else:
        records = [run(item) for item in items]
    records.sort(key=lambda r: r.index)
    best = min(records, key=lambda r: r.rank_key(maximize))
    return SearchResult(best, records, metric, maximize, empty)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_trials(result: SearchResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial", "assignment", "metric"])
        for r in result.records:
            writer.writerow([r.index, json.dumps(r.assignment, sort_keys=True), repr(r.metric)])
    return path


def best_document(result: SearchResult) -> dict:
    return {"trial": result.best.index, "assignment": result.best.assignment,
            "metric": _jsonable(result.best.metric), "metric_name": result.metric,
            "direction": "max" if result.maximize else "min", "empty_space": result.empty_space,
            "diverged_trials": [r.index for r in result.records if r.diverged]}
