"""Model-card zoo: an exact cosine index over rendered cards plus LLM selection.

On disk a zoo is ``<dir>/cards/*.json`` (one card per file) and an
optional ``<dir>/vectors.json`` sidecar; the sidecar is rebuilt from the
cards whenever it is missing or was made by a different embedder.
"""

from __future__ import annotations

import json
import math
import re
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .llm import prompts
from .llm.gateway import Gateway
from .llm.jsonx import NAME_REASON, extract_strict_json
from .llm.prompts import PromptBundle, Purpose
from .modality import ModalitySchema
from .table import Modality


class ZooError(ValueError):
    pass


def card_id_for(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


@dataclass(frozen=True)
class ModelCard:
    name: str
    model_type: str
    modalities: frozenset
    description: str
    performance_notes: str = ""
    hardware_requirements: str = ""
    output_feature_dim: int = 1
    config: dict = field(default_factory=dict, hash=False, compare=True)
    card_id: str = ""

    def __post_init__(self):
        if not self.name:
            raise ZooError("model card needs a name")
        mods = frozenset(Modality(m) for m in self.modalities)
        if not mods:
            raise ZooError(f"card {self.name!r} lists no modalities")
        if int(self.output_feature_dim) < 1:
            raise ZooError(f"card {self.name!r}: output_feature_dim must be >= 1")
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "output_feature_dim", int(self.output_feature_dim))
        if not self.card_id:
            object.__setattr__(self, "card_id", card_id_for(self.name))

    def sorted_modalities(self) -> list[Modality]:
        return sorted(self.modalities, key=lambda m: m.rank)

    def render(self) -> str:
        """Canonical text used for embedding and for the selection prompt."""
        return "\n".join([
            f"name: {self.name}",
            f"type: {self.model_type}",
            f"modalities: {', '.join(m.value for m in self.sorted_modalities())}",
            f"description: {self.description}",
            f"performance: {self.performance_notes}",
            f"hardware: {self.hardware_requirements}",
        ])

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["modalities"] = [m.value for m in self.sorted_modalities()]
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModelCard":
        return cls(**{k: doc[k] for k in doc if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class SelectionResult:
    name: str
    reason: str
    candidates_considered: tuple[str, ...]

    def __post_init__(self):
        if self.name not in self.candidates_considered:
            raise ZooError(f"selected {self.name!r} is not among the candidates")

    def to_json(self) -> dict:
        return {"name": self.name, "reason": self.reason, "candidates_considered": list(self.candidates_considered)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "SelectionResult":
        return cls(doc["name"], doc["reason"], tuple(doc["candidates_considered"]))


def cosine_scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    # Correctly rounded per-row sums: a BLAS product may round identical rows
    # differently by position, which would break exact ties.
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    query = np.asarray(query, dtype=float)
    dots = np.array([math.fsum(r) for r in matrix * query])
    norms = np.sqrt([math.fsum(r) for r in matrix * matrix]) * math.sqrt(math.fsum(query * query))
    return dots / np.where(norms == 0, 1.0, norms)


class ModelZoo:
    """Cards keyed by ``card_id`` with one embedding vector each."""

    def __init__(self, gateway: Gateway, embedding_dim: int | None = None):
        self.gateway = gateway
        self.embedding_dim = embedding_dim or gateway.config.embedding_dim
        self._entries: dict[str, tuple[np.ndarray, ModelCard]] = {}
        self._names: dict[str, str] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self.cards())

    def cards(self) -> list[ModelCard]:
        return [card for _, card in self._entries.values()]

    def vector(self, card_id: str) -> np.ndarray:
        return self._entries[card_id][0]

    def get(self, card_id: str) -> ModelCard:
        try:
            return self._entries[card_id][1]
        except KeyError:
            raise ZooError(f"no card with id {card_id!r}") from None

    def by_name(self, name: str) -> ModelCard:
        if name not in self._names:
            raise ZooError(f"no card named {name!r}")
        return self.get(self._names[name])

    def _check(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.embedding_dim,):
            raise ZooError(f"embedding dimension {vec.shape[0] if vec.ndim else 0} != index dimension {self.embedding_dim}")
        return vec

    def add_card(self, card: ModelCard, vector: np.ndarray | None = None) -> str:
        vec = self._check(self.gateway.embed(card.render()) if vector is None else vector)
        with self._lock:
            if card.name in self._names:
                raise ZooError(f"duplicate model name {card.name!r}")
            if card.card_id in self._entries:
                raise ZooError(f"card id {card.card_id!r} already used by {self._entries[card.card_id][1].name!r}")
            self._entries[card.card_id] = (vec, card)
            self._names[card.name] = card.card_id
        return card.card_id

    def retrieve_candidates(self, modality: Modality, user_request: str, k: int = 5) -> list[ModelCard]:
        """Modality filter, then cosine ranking against the request; ties by name."""
        modality = Modality(modality)
        survivors = [(vec, card) for vec, card in self._entries.values() if modality in card.modalities]
        if not survivors:
            raise ZooError(f"no card supports modality {modality.value!r}")
        query = self.gateway.embed(user_request) if user_request else np.zeros(self.embedding_dim)
        scores = cosine_scores(np.stack([v for v, _ in survivors]), query)
        order = sorted(range(len(survivors)), key=lambda i: (-scores[i], survivors[i][1].name))
        return [survivors[i][1] for i in order[:k]]

    def similarities(self, user_request: str) -> dict[str, float]:
        query = self.gateway.embed(user_request)
        return {card.name: float(cosine_scores(vec[None, :], query)[0]) for vec, card in self._entries.values()}

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        cards_dir = directory / "cards"
        cards_dir.mkdir(parents=True, exist_ok=True)
        vectors = {}
        for cid, (vec, card) in sorted(self._entries.items()):
            (cards_dir / f"{cid}.json").write_text(json.dumps(card.to_json(), indent=2) + "\n")
            vectors[cid] = vec.tolist()
        doc = {"embedder": self.gateway.embedder_name, "dim": self.embedding_dim, "vectors": vectors}
        tmp = directory / "vectors.json.tmp"
        tmp.write_text(json.dumps(doc))
        tmp.replace(directory / "vectors.json")
        return directory

    @classmethod
    def load(cls, directory, gateway: Gateway) -> "ModelZoo":
        directory = Path(directory)
        cards = [ModelCard.from_json(json.loads(p.read_text())) for p in sorted((directory / "cards").glob("*.json"))]
        vectors = {}
        sidecar = directory / "vectors.json"
        if sidecar.exists():
            doc = json.loads(sidecar.read_text())
            if doc.get("embedder") == gateway.embedder_name and doc.get("dim") == gateway.config.embedding_dim:
                vectors = doc["vectors"]
        return cls.from_cards(cards, gateway, vectors)

    @classmethod
    def from_cards(cls, cards: Iterable[ModelCard], gateway: Gateway, vectors: Mapping | None = None) -> "ModelZoo":
        zoo = cls(gateway)
        for card in cards:
            vec = (vectors or {}).get(card.card_id)
            zoo.add_card(card, None if vec is None else np.asarray(vec))
        return zoo


def builtin_cards() -> list[ModelCard]:
    root = resources.files("tablefuse") / "data" / "zoo" / "cards"
    docs = [json.loads(p.read_text()) for p in root.iterdir() if p.name.endswith(".json")]
    return sorted((ModelCard.from_json(d) for d in docs), key=lambda c: c.name)


def builtin_zoo(gateway: Gateway) -> ModelZoo:
    return ModelZoo.from_cards(builtin_cards(), gateway)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def describe_data(task: str, label_column: str, schema: ModalitySchema, metric: str) -> str:
    """Data description for the selection prompt: task, label, metric, modality counts."""
    counts = Counter(m.value for c, m in schema.modalities.items() if c != label_column)
    parts = ", ".join(f"{n} {m}" for m, n in sorted(counts.items(), key=lambda kv: Modality(kv[0]).rank))
    label_type = schema[label_column].value if label_column in schema else "unknown"
    return (f"a {task} task predicting '{label_column}' ({label_type} label), evaluated by {metric}; "
            f"feature columns: {parts}")


def build_selection_prompt(candidates: list[ModelCard], data_description: str, user_request: str) -> PromptBundle:
    cards = "\n\n".join(c.render() for c in candidates)
    system = prompts.render(prompts.SELECT_SYSTEM, model_cards=cards)
    user = prompts.render(prompts.SELECT_USER, data_desc=data_description, user_request=user_request)
    return PromptBundle(Purpose.SELECT, system, user)


def select_model(candidates: list[ModelCard], data_description: str, user_request: str,
                 gateway: Gateway) -> SelectionResult:
    if not candidates:
        raise ZooError("no candidates to select from")
    if len(candidates) > 5:
        raise ZooError(f"at most 5 candidates allowed, got {len(candidates)}")
    names = tuple(c.name for c in candidates)
    if len(candidates) == 1:
        return SelectionResult(names[0], "sole candidate", names)

    def parse(text: str) -> SelectionResult:
        doc = extract_strict_json(text, NAME_REASON)
        if doc["name"] not in names:
            raise ZooError(f"selected name {doc['name']!r} is not one of the candidates {list(names)}")
        return SelectionResult(doc["name"], doc["reason"], names)

    bundle = build_selection_prompt(candidates, data_description, user_request)
    try:
        return parse(gateway.complete(bundle).text)
    except ValueError as exc:
        note = (f"Your previous answer was invalid: {exc}. Answer with JSON only and choose the name "
                f"from: {', '.join(names)}.")
        return parse(gateway.complete(bundle.with_correction(note)).text)


class SelectionError(ZooError):
    def __init__(self, modality: Modality, cause: Exception):
        super().__init__(f"[{modality.value}] {cause}")
        self.modality = modality


def select_per_modality(zoo: ModelZoo, schema: ModalitySchema, label_column: str | None, data_description: str,
                        user_request: str, k: int = 5) -> dict[Modality, SelectionResult]:
    modalities = schema.feature_modalities(label_column)
    if not modalities:
        raise ZooError("no feature modalities")
    out = {}
    for modality in modalities:
        try:
            candidates = zoo.retrieve_candidates(modality, user_request, k)
            out[modality] = select_model(candidates, data_description, user_request, zoo.gateway)
        except (ValueError, RuntimeError) as exc:
            raise SelectionError(modality, exc) from exc
    return out
