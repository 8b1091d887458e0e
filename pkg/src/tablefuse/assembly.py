"""Pipeline assembly: the late-fusion spec, the data-processor plan, and the
optional generated fusion source (validated as text, never executed)."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

from .llm import prompts
from .llm.gateway import Gateway
from .llm.prompts import PromptBundle, Purpose
from .modality import ModalitySchema
from .table import Modality, StructuredTable
from .zoo import ModelCard, SelectionResult

PIPELINE_VERSION = 1
DEFAULT_HASH_WIDTH = 64


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class Branch:
    modality: Modality
    model: str
    feature_dim: int


@dataclass(frozen=True)
class FusionSpec:
    branches: tuple[Branch, ...]
    hidden_widths: tuple[int, ...]
    output_dim: int
    branch_weights: tuple[float, ...]
    fusion_weight: float = 1.0

    def __post_init__(self):
        if not self.branches:
            raise AssemblyError("fusion needs at least one branch")
        if self.output_dim < 1:
            raise AssemblyError("output_dim must be >= 1")
        if len(self.branch_weights) != len(self.branches):
            raise AssemblyError("one loss weight per branch required")
        weights = (self.fusion_weight, *self.branch_weights)
        if any(w < 0 or not math.isfinite(w) for w in weights) or sum(weights) <= 0:
            raise AssemblyError(f"loss weights must be non-negative with a positive sum, got {weights}")
        if any(w < 1 for w in self.hidden_widths):
            raise AssemblyError("hidden widths must be positive")

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def max_dim(self) -> int:
        return max(b.feature_dim for b in self.branches)

    @property
    def adapters(self) -> list[tuple[int, int]]:
        return [(b.feature_dim, self.max_dim) for b in self.branches]

    @property
    def concat_dim(self) -> int:
        return self.n_branches * self.max_dim

    @property
    def body_dims(self) -> list[tuple[int, int]]:
        widths = [self.concat_dim, *self.hidden_widths]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def head_dims(self) -> tuple[int, int]:
        return ((self.hidden_widths[-1] if self.hidden_widths else self.concat_dim), self.output_dim)

    def with_weights(self, branch_weights: Sequence[float] | None = None, fusion_weight: float | None = None):
        return replace(self,
                       branch_weights=tuple(branch_weights) if branch_weights is not None else self.branch_weights,
                       fusion_weight=self.fusion_weight if fusion_weight is None else fusion_weight)

    def with_hidden(self, hidden_widths: Sequence[int]) -> "FusionSpec":
        return replace(self, hidden_widths=tuple(hidden_widths))

    def to_json(self) -> dict:
        return {
            "branches": [{"modality": b.modality.value, "model": b.model, "feature_dim": b.feature_dim}
                         for b in self.branches],
            "max_dim": self.max_dim,
            "adapters": [list(a) for a in self.adapters],
            "concat_dim": self.concat_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "branch_weights": list(self.branch_weights),
            "fusion_weight": self.fusion_weight,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "FusionSpec":
        return cls(
            branches=tuple(Branch(Modality(b["modality"]), b["model"], int(b["feature_dim"])) for b in doc["branches"]),
            hidden_widths=tuple(int(w) for w in doc["hidden_widths"]),
            output_dim=int(doc["output_dim"]),
            branch_weights=tuple(float(w) for w in doc["branch_weights"]),
            fusion_weight=float(doc["fusion_weight"]),
        )


def build_fusion_spec(selections: Mapping[Modality, SelectionResult], cards: Callable[[str], ModelCard],
                      output_dim: int, hidden_widths: Sequence[int] | None = None) -> FusionSpec:
    """Branches in canonical modality order, adapters to the largest branch dim.

    ``cards`` maps a model name to its card (e.g. ``zoo.by_name``). Without
    ``hidden_widths`` the body is two layers of width D.
    """
    if not selections:
        raise AssemblyError("no selections to assemble")
    if output_dim < 1:
        raise AssemblyError("output_dim must be >= 1")
    branches = []
    for modality in sorted((Modality(m) for m in selections), key=lambda m: m.rank):
        card = cards(selections[modality].name)
        branches.append(Branch(modality, card.name, card.output_feature_dim))
    d_max = max(b.feature_dim for b in branches)
    widths = tuple(hidden_widths) if hidden_widths is not None else (d_max, d_max)
    return FusionSpec(tuple(branches), widths, output_dim, tuple(1.0 for _ in branches), 1.0)


# ---------------------------------------------------------------------------
# Processor plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProcessorPlan:
    """modality -> descriptor dict, plus a label descriptor. Never a fusion entry.

    Descriptors are unfitted as built; :meth:`fit` fills statistics from the
    training rows.
    """

    processors: dict
    label_processor: dict

    def keys(self) -> list[str]:
        return [*self.processors, "label"]

    @property
    def fitted(self) -> bool:
        return all(d.get("fitted", False) for d in (*self.processors.values(), self.label_processor))

    def fit(self, table: StructuredTable, rows: Sequence[int], data_root=None) -> "ProcessorPlan":
        from .runtime import fit_descriptor
        procs = {m: fit_descriptor(d, table, rows, data_root) for m, d in self.processors.items()}
        return ProcessorPlan(procs, fit_descriptor(self.label_processor, table, rows, data_root))

    def to_json(self) -> dict:
        return {"processors": self.processors, "label": self.label_processor}

    @classmethod
    def from_json(cls, doc: Mapping) -> "ProcessorPlan":
        return cls(dict(doc["processors"]), dict(doc["label"]))


def build_processor_plan(schema: ModalitySchema, selections: Mapping[Modality, SelectionResult],
                         label_column: str, task: str,
                         cards: Callable[[str], ModelCard] | None = None) -> ProcessorPlan:
    procs = {}
    for modality in schema.feature_modalities(label_column):
        if modality not in selections:
            raise AssemblyError(f"no model selected for modality {modality.value!r}")
        columns = [c for c in schema.columns_of(modality) if c != label_column]
        config = cards(selections[modality].name).config if cards else {}
        if modality == Modality.NUMERICAL:
            desc = {"kind": "standardize", "columns": columns}
        elif modality == Modality.CATEGORICAL:
            desc = {"kind": "one_hot", "columns": columns}
        elif modality == Modality.TEXT:
            desc = {"kind": "hashed_ngrams", "columns": columns,
                    "width": int(config.get("hash_width", DEFAULT_HASH_WIDTH)), "n": 3}
        else:
            desc = {"kind": "sidecar", "columns": columns}
        desc["model"] = selections[modality].name
        procs[modality.value] = desc
    if task == "regression":
        label = {"kind": "identity", "column": label_column}
    else:
        label = {"kind": "index_map", "column": label_column}
    return ProcessorPlan(procs, label)


# ---------------------------------------------------------------------------
# Generated source artifacts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CodeArtifact:
    """Generated source kept as text. Nothing here ever runs it."""

    text: str
    validation: tuple[tuple[str, bool], ...]

    @property
    def ok(self) -> bool:
        return all(passed for _, passed in self.validation)

    def report(self) -> dict:
        return {"ok": self.ok, "checks": {name: passed for name, passed in self.validation}}


def validate_fusion_code(text: str, spec: FusionSpec) -> tuple[tuple[str, bool], ...]:
    checks = [
        ("defines_fusion_model", re.search(r"\bfusion_model\b", text) is not None),
        ("defines_fusion_head", re.search(r"\bfusion_head\b", text) is not None),
    ]
    for b in spec.branches:
        checks.append((f"references_model:{b.model}", b.model in text))
    for key in ("logits", "features", "weight"):
        checks.append((f"output_key:{key}", re.search(rf"[\"']{key}[\"']", text) is not None))
    checks.append(("mentions_max_dim", re.search(rf"(?<!\d){spec.max_dim}(?!\d)", text) is not None))
    return tuple(checks)


def _base_configs(spec: FusionSpec, cards: Callable[[str], ModelCard]) -> str:
    return json.dumps({b.model: {**cards(b.model).config, "out_features_dim": b.feature_dim,
                                 "modality": b.modality.value} for b in spec.branches}, sort_keys=True)


def generate_code_artifact(spec: FusionSpec, cards: Callable[[str], ModelCard], gateway: Gateway) -> CodeArtifact:
    fusion_config = json.dumps({"hidden_widths": list(spec.hidden_widths), "output_dim": spec.output_dim,
                                "max_dim": spec.max_dim, "loss_weight": spec.fusion_weight})
    system = prompts.render(prompts.FUSION_SYSTEM, base_configs=_base_configs(spec, cards), fusion_config=fusion_config)
    text = gateway.complete(PromptBundle(Purpose.ASSEMBLE_FUSION, system, prompts.FUSION_USER)).text
    if not text.strip():
        raise AssemblyError("generated fusion code is empty")
    return CodeArtifact(text, validate_fusion_code(text, spec))


def validate_processor_code(text: str, plan: ProcessorPlan) -> tuple[tuple[str, bool], ...]:
    checks = [("label_processor", re.search(r"label", text, re.I) is not None),
              ("no_fusion_processor", re.search(r"[\"']fusion[\"']\s*:", text) is None)]
    for modality in plan.processors:
        checks.append((f"processor:{modality}", modality.split("_")[0] in text.lower()))
    return tuple(checks)


def generate_processor_artifact(plan: ProcessorPlan, cards: Callable[[str], ModelCard],
                                gateway: Gateway) -> CodeArtifact:
    configs = json.dumps({m: {"model": d["model"], **cards(d["model"]).config} for m, d in plan.processors.items()},
                         sort_keys=True)
    user = prompts.render(prompts.PROCESSORS_USER, configs=configs)
    text = gateway.complete(PromptBundle(Purpose.ASSEMBLE_PROCESSORS, prompts.render(prompts.PROCESSORS_SYSTEM), user)).text
    if not text.strip():
        raise AssemblyError("generated processor code is empty")
    return CodeArtifact(text, validate_processor_code(text, plan))


def pipeline_document(spec: FusionSpec, plan: ProcessorPlan, task: str, label_column: str) -> dict:
    return {"version": PIPELINE_VERSION, "task": task, "label_column": label_column,
            "fusion": spec.to_json(), "processors": plan.to_json()}


def load_pipeline_document(doc: Mapping) -> tuple[FusionSpec, ProcessorPlan]:
    if doc.get("version") != PIPELINE_VERSION:
        raise AssemblyError(f"unsupported pipeline.json version {doc.get('version')!r}")
    return FusionSpec.from_json(doc["fusion"]), ProcessorPlan.from_json(doc["processors"])
