"""Offline stand-ins for an OpenAI-compatible endpoint.

:class:`ScriptedLLM` answers chat-completion and embedding requests with
simple deterministic rules. It is what the committed fixtures were recorded
against: point a ``record``-mode gateway at ``ScriptedLLM(...).transport()``
and every prompt/response pair lands in the fixture store.

:class:`NoNetworkTransport` fails any request it sees, to prove replay mode
never touches the network.
"""

from __future__ import annotations

import json
import re
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import httpx
import numpy as np

from .llm import prompts
from .llm.embedding import HashingEmbedder
from .llm.prompts import Purpose
from .table import MISSING, StructuredTable

_SYSTEM_HEADS = {
    Purpose.MODALITY: prompts.MODALITY_SYSTEM,
    Purpose.FILTER: prompts.FILTER_SYSTEM,
    Purpose.IMPUTE: prompts.IMPUTE_SYSTEM,
    Purpose.SELECT: prompts.SELECT_SYSTEM,
    Purpose.ASSEMBLE_PROCESSORS: prompts.PROCESSORS_SYSTEM,
    Purpose.ASSEMBLE_FUSION: prompts.FUSION_SYSTEM,
    Purpose.HPO_DESCRIBE: prompts.HPO_DESCRIBE_SYSTEM,
    Purpose.HPO_SPACE: prompts.HPO_SPACE_SYSTEM,
}

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp")
VIDEO_SUFFIXES = (".mp4", ".avi", ".mov", ".mkv", ".webm")
_WORD = re.compile(r"[a-z0-9]+")
_STOP = {"the", "and", "for", "with", "that", "this", "model", "models", "have", "want", "would", "will", "from",
         "into", "about", "task", "data", "should", "focus", "especially", "particularly", "specific", "ensuring"}

HPO_DESCRIPTIONS = {
    "learning_rate": "Step size of each gradient update; larger values train faster but may diverge.",
    "batch_size": "Number of rows per gradient step; smaller batches add noise and take more steps.",
    "epochs": "Number of passes over the training rows.",
    "hidden_size": "Width of each hidden layer in the fusion body.",
    "loss_weight": "Weight of every per-branch loss term relative to the fused term.",
    "checkpoint_name": "Name of the pretrained weights the branch starts from.",
}


def detect_purpose(system_text: str) -> Purpose:
    for purpose, template in _SYSTEM_HEADS.items():
        head = template.split("\n", 1)[0]
        if system_text.startswith(head):
            return purpose
    raise ValueError("unrecognised system prompt")


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _is_int(text: str) -> bool:
    return re.fullmatch(r"[+-]?\d+", text.strip()) is not None


def guess_modality(values: list[str]) -> str:
    """Crude column typing from a handful of sampled values."""
    vals = [v for v in values if v != MISSING] or values
    low = [v.lower() for v in vals]
    if all(v.endswith(IMAGE_SUFFIXES) for v in low):
        return "image_path"
    if all(v.endswith(VIDEO_SUFFIXES) for v in low):
        return "video_path"
    if all(_is_number(v) for v in vals):
        if all(_is_int(v) for v in vals) and max(abs(int(v)) for v in vals) <= 10 and len(set(vals)) <= 3:
            return "categorical"
        return "numerical"
    if any(len(v.split()) > 2 for v in vals):
        return "text"
    return "categorical"


def parse_modality_rows(user_text: str) -> dict[str, list[str]]:
    body = user_text.split("Date:", 1)[1].rsplit("\nOutput:", 1)[0]
    columns: dict[str, list[str]] = {}
    for line in body.strip("\n").split("\n"):
        for part in line.split("; "):
            name, _, value = part.partition(": ")
            columns.setdefault(name, []).append(value)
    return columns


def _words(text: str) -> set[str]:
    return {w[:5] for w in _WORD.findall(text.lower()) if len(w) >= 3 and w not in _STOP}


@dataclass
class ScriptedLLM:
    """Deterministic rule-based answers, one rule set per prompt purpose.

    ``filter_drop``
        feature names removed by the filter prompt.
    ``reference``
        table whose complete rows answer imputation prompts by matching.
    ``hpo_answer``
        raw JSON object returned for the search-space prompt; by default
        learning_rate and loss_weight are halved/doubled around the config.
    ``overrides``
        purpose value -> fixed response text (for adversarial recordings).
    """

    filter_drop: frozenset = frozenset()
    reference: StructuredTable | None = None
    hpo_answer: Mapping | None = None
    overrides: dict = field(default_factory=dict)
    embedding_dim: int = 256
    neighbours: int = 15
    requests: list = field(default_factory=list)

    def __post_init__(self):
        self.filter_drop = frozenset(self.filter_drop)
        self._embedder = HashingEmbedder(self.embedding_dim)

    # -- transport ---------------------------------------------------------

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handle)

    def handle(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.requests.append(body)
        if request.url.path.endswith("/embeddings"):
            vec = self._embedder(body["input"]).tolist()
            return httpx.Response(200, json={"data": [{"embedding": vec, "index": 0}]})
        if not request.url.path.endswith("/chat/completions"):
            return httpx.Response(404, json={"error": "unknown path"})
        messages = {m["role"]: m["content"] for m in body["messages"]}
        text = self.answer(messages["system"], messages["user"])
        return httpx.Response(200, json={"choices": [{"index": 0, "message": {"role": "assistant",
                                                                               "content": text}}]})

    def answer(self, system_text: str, user_text: str) -> str:
        purpose = detect_purpose(system_text)
        if purpose.value in self.overrides:
            return self.overrides[purpose.value]
        handler = getattr(self, f"_answer_{purpose.value}")
        return handler(system_text, user_text)

    # -- rules ---------------------------------------------------------------

    def _answer_modality(self, system_text, user_text):
        cols = parse_modality_rows(user_text)
        return json.dumps({c: guess_modality(v) for c, v in cols.items()})

    def _answer_filter(self, system_text, user_text):
        feats = json.loads(user_text.rsplit(", features:", 1)[1].rsplit("\nOutput:", 1)[0])
        return json.dumps([f for f in feats if f not in self.filter_drop])

    def _parse_sequence(self, user_text: str) -> dict[str, str]:
        seq = user_text.split("feature sequence:", 1)[1].rsplit("\nOutput:", 1)[0]
        names = [c for c in self.reference.columns if re.search(rf"(^|, ){re.escape(c)}: ", seq)]
        pattern = "|".join(re.escape(c) for c in names)
        out, marks = {}, list(re.finditer(rf"(?:^|, )({pattern}): ", seq))
        for k, m in enumerate(marks):
            end = marks[k + 1].start() if k + 1 < len(marks) else len(seq)
            out[m.group(1)] = seq[m.end():end]
        return out

    def _answer_impute(self, system_text, user_text):
        if self.reference is None:
            return "0"
        seq = self._parse_sequence(user_text)
        target = next(c for c, v in seq.items() if v == MISSING)
        ref = self.reference
        pool = [i for i, row in enumerate(ref.cells) if MISSING not in row]
        levels = {c: len(set(ref.column(c))) for c in seq}
        exact = [c for c, v in seq.items() if c != target and levels[c] <= 20 and v != MISSING]
        numeric = [c for c, v in seq.items() if c != target and c not in exact and _is_number(v)]
        matched = [i for i in pool if all(ref.row(i)[c] == seq[c] for c in exact)] or pool

        def distance(i):
            row = ref.row(i)
            total = 0.0
            for c in numeric:
                vals = [float(x) for x in ref.column(c) if _is_number(x)]
                scale = (statistics.pstdev(vals) or 1.0) if vals else 1.0
                total += abs(float(row[c]) - float(seq[c])) / scale if _is_number(row[c]) else 1.0
            return total

        nearest = sorted(matched, key=lambda i: (distance(i), i))[: self.neighbours]
        values = [ref.row(i)[target] for i in nearest]
        if all(_is_number(v) for v in values) and levels[target] > 20:
            med = statistics.median(float(v) for v in values)
            return str(int(round(med))) if all(_is_int(v) for v in values) else repr(med)
        counts = Counter(values)
        top = max(counts.values())
        return sorted(v for v, n in counts.items() if n == top)[0]

    def _answer_select(self, system_text, user_text):
        cards = system_text.split("Please choose the most suitable model from:\n", 1)[1].split("\n\n")
        request = user_text.split("user request: ", 1)[1].rsplit(",please select", 1)[0]
        want = _words(request)
        best, best_score = None, -1
        for block in cards:
            name = block.split("\n", 1)[0].removeprefix("name: ")
            score = len(want & _words(block))
            if score > best_score:
                best, best_score = name, score
        hits = sorted(want & _words(next(b for b in cards if b.startswith(f"name: {best}\n"))))
        reason = (f"its card matches the request on: {', '.join(hits)}" if hits
                  else "it is the first-ranked candidate for this modality")
        return json.dumps({"name": best, "reason": reason})

    def _answer_hpo_describe(self, system_text, user_text):
        config = json.loads(user_text.split("Given the config as follow: ", 1)[1].rsplit("\n\nYour answer:", 1)[0])
        return json.dumps({k: HPO_DESCRIPTIONS.get(k, f"Setting {k} of the training run.") for k in config})

    def _answer_hpo_space(self, system_text, user_text):
        if self.hpo_answer is not None:
            return json.dumps(dict(self.hpo_answer))
        config = json.loads(user_text.split("Given the config as follow: ", 1)[1].split("\n\nGiven the user", 1)[0])
        names = ["loss_weight"] if "checkpoint_name" in config else ["learning_rate", "loss_weight"]
        out = {}
        for n in names:
            if n in config:
                v = float(config[n])
                out[n] = f"[{v / 2!r},{v!r},{v * 2!r}]"
        return json.dumps(out)

    def _answer_assemble_fusion(self, system_text, user_text):
        base = json.loads(system_text.split("base models' config as follow:", 1)[1].split(";\nGive the fusion", 1)[0])
        dims = {name: cfg["out_features_dim"] for name, cfg in base.items()}
        d_max = max(dims.values())
        lines = ["import torch", "from torch import nn", "", "class Fusion(nn.Module):",
                 "    def __init__(self, base_models, num_classes, loss_weight=1.0):",
                 "        super().__init__()",
                 "        self.model = nn.ModuleList(base_models)",
                 "        self.loss_weight = loss_weight",
                 f"        # maximum branch dimension is {d_max}",
                 f"        self.adapter = nn.ModuleList([nn.Linear(m.out_features_dim, {d_max}) for m in base_models])",
                 f"        self.fusion_model = nn.Sequential(nn.Linear({d_max} * len(base_models), {d_max}), nn.Tanh())",
                 f"        self.fusion_head = nn.Linear({d_max}, num_classes)",
                 f"        self.model_name = {sorted(dims)!r}",
                 "", "    def forward(self, batch):",
                 "        out = {}",
                 "        feats = []",
                 "        for name, model, adapter in zip(self.model_name, self.model, self.adapter):",
                 "            o = model(batch)",
                 "            out[name] = {\"logits\": o[\"logits\"], \"features\": o[\"features\"], \"weight\": self.loss_weight}",
                 "            feats.append(adapter(o[\"features\"]))",
                 "        fusion_features = self.fusion_model(torch.cat(feats, dim=1))",
                 "        fusion_logits = self.fusion_head(fusion_features)",
                 "        out[\"fusion\"] = {\"logits\": fusion_logits, \"features\": fusion_features, \"weight\": 1.0}",
                 "        return out"]
        return "\n".join(lines)

    def _answer_assemble_processors(self, system_text, user_text):
        configs = json.loads(user_text.split("config as follow:", 1)[1].rsplit("\n\nYour answer:", 1)[0])
        lines = ["from multimodal.data import (CategoricalProcessor, ImageProcessor, LabelProcessor,",
                 "                              NumericalProcessor, TextProcessor)", "",
                 "def get_processors(configs):", "    return {"]
        for modality in configs:
            cls = {"numerical": "NumericalProcessor", "categorical": "CategoricalProcessor",
                   "text": "TextProcessor"}.get(modality, "ImageProcessor")
            lines.append(f"        \"{modality}\": {cls}(configs[\"{modality}\"]),")
        lines += ["        \"label\": LabelProcessor(configs),", "    }"]
        return "\n".join(lines)


class NoNetworkTransport(httpx.BaseTransport):
    """Counts and rejects every request."""

    def __init__(self):
        self.attempts = 0

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        self.attempts += 1
        raise AssertionError(f"network access attempted: {request.method} {request.url}")


def unit_vector(seed: int, dim: int) -> np.ndarray:
    v = np.random.default_rng(seed).normal(size=dim)
    return v / np.linalg.norm(v)
