"""Desk-scale executor for the assembled late-fusion pipeline.

Per branch i the encoded input ``x_i`` (batch, d_i) goes through a learnable
adapter to width D, the adapted blocks are concatenated to (batch, n*D),
and a tanh MLP body plus a linear head produce the fused logits. Every
branch also carries a linear head so the loss can weight branch and fusion
terms separately.

Gradients are hand-written; ``tests/test_runtime.py`` checks them against
central finite differences.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .assembly import FusionSpec, ProcessorPlan
from .llm.embedding import HashingEmbedder
from .table import MISSING, StructuredTable

TASKS = ("binary", "multiclass", "regression", "retrieval_pairs")
TASK_METRIC = {"binary": "auc", "multiclass": "accuracy", "regression": "rmse", "retrieval_pairs": "auc"}
LOWER_IS_BETTER = {"rmse"}


class RuntimeFailure(ValueError):
    pass


class ShapeMismatch(RuntimeFailure):
    pass


class NonFiniteLoss(RuntimeFailure):
    def __init__(self, term: str):
        super().__init__(f"non-finite loss in {term}")
        self.term = term


class TrainingDiverged(RuntimeFailure):
    def __init__(self, epoch: int, term: str = "loss"):
        super().__init__(f"training diverged at epoch {epoch} ({term})")
        self.epoch = epoch


def metric_for(task: str) -> str:
    try:
        return TASK_METRIC[task]
    except KeyError:
        raise RuntimeFailure(f"unknown task {task!r}; expected one of {TASKS}") from None


def higher_is_better(metric: str) -> bool:
    return metric not in LOWER_IS_BETTER


# ---------------------------------------------------------------------------
# Data processors
# ---------------------------------------------------------------------------

def _parse_float(value: str) -> float:
    try:
        out = float(value)
    except ValueError:
        return math.nan
    return out if math.isfinite(out) else math.nan


def _sort_levels(levels) -> list[str]:
    levels = list(levels)
    try:
        return sorted(levels, key=float)
    except ValueError:
        return sorted(levels)


@lru_cache(maxsize=65536)
def _read_sidecar(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise RuntimeFailure(f"sidecar feature file missing: {path}")
    return np.asarray(p.read_text().split(), dtype=float)


def _sidecar_path(root, cell: str) -> str:
    return str(Path(root or ".") / cell)


def fit_descriptor(desc: Mapping, table: StructuredTable, rows: Sequence[int], data_root=None) -> dict:
    out = dict(desc)
    kind = desc["kind"]
    if kind == "standardize":
        means, stds = [], []
        for col in desc["columns"]:
            j = table.index(col)
            vals = np.array([_parse_float(table.cells[r][j]) for r in rows])
            vals = vals[np.isfinite(vals)]
            mean = float(vals.mean()) if vals.size else 0.0
            std = float(vals.std()) if vals.size else 1.0
            means.append(mean)
            stds.append(std if std > 0 else 1.0)
        out.update(mean=means, std=stds)
    elif kind == "one_hot":
        levels = {}
        for col in desc["columns"]:
            j = table.index(col)
            levels[col] = _sort_levels({table.cells[r][j] for r in rows} - {MISSING})
        out["levels"] = levels
    elif kind == "hashed_ngrams":
        pass
    elif kind == "sidecar":
        dims = {}
        for col in desc["columns"]:
            j = table.index(col)
            cell = next((table.cells[r][j] for r in rows if table.cells[r][j] != MISSING), None)
            if cell is None:
                raise RuntimeFailure(f"column {col!r} has no sidecar paths in the training rows")
            dims[col] = int(_read_sidecar(_sidecar_path(data_root, cell)).size)
        out["dims"] = dims
    elif kind == "index_map":
        j = table.index(desc["column"])
        out["classes"] = _sort_levels({table.cells[r][j] for r in rows})
    elif kind == "identity":
        pass
    else:
        raise RuntimeFailure(f"unknown processor kind {kind!r}")
    out["fitted"] = True
    return out


def descriptor_width(desc: Mapping) -> int:
    kind = desc["kind"]
    if kind == "standardize":
        return len(desc["columns"])
    if kind == "one_hot":
        return sum(len(desc["levels"][c]) for c in desc["columns"])
    if kind == "hashed_ngrams":
        return int(desc["width"]) * len(desc["columns"])
    if kind == "sidecar":
        return sum(int(desc["dims"][c]) for c in desc["columns"])
    raise RuntimeFailure(f"processor kind {kind!r} has no feature width")


def apply_descriptor(desc: Mapping, table: StructuredTable, rows: Sequence[int], data_root=None) -> np.ndarray:
    """Engineered feature matrix (len(rows), width) for one fitted descriptor."""
    if not desc.get("fitted"):
        raise RuntimeFailure("processor must be fitted on the training split first")
    kind = desc["kind"]
    blocks = []
    for k, col in enumerate(desc["columns"]):
        j = table.index(col)
        cells = [table.cells[r][j] for r in rows]
        if kind == "standardize":
            vals = np.array([_parse_float(c) for c in cells])
            # unparsable or missing -> training mean
            vals = np.where(np.isfinite(vals), vals, desc["mean"][k])
            blocks.append(((vals - desc["mean"][k]) / desc["std"][k])[:, None])
        elif kind == "one_hot":
            levels = desc["levels"][col]
            index = {lv: i for i, lv in enumerate(levels)}
            block = np.zeros((len(cells), len(levels)))
            for i, c in enumerate(cells):
                if c in index:
                    block[i, index[c]] = 1.0
            blocks.append(block)
        elif kind == "hashed_ngrams":
            enc = _text_encoder(int(desc["width"]))
            blocks.append(np.stack([np.zeros(enc.dim) if (not c or c == MISSING) else enc(c) for c in cells])
                          if cells else np.zeros((0, enc.dim)))
        elif kind == "sidecar":
            dim = int(desc["dims"][col])
            block = np.zeros((len(cells), dim))
            for i, c in enumerate(cells):
                vec = _read_sidecar(_sidecar_path(data_root, c))
                if vec.size != dim:
                    raise RuntimeFailure(f"sidecar {c!r} has {vec.size} values, expected {dim}")
                block[i] = vec
            blocks.append(block)
        else:
            raise RuntimeFailure(f"unknown processor kind {kind!r}")
    return np.concatenate(blocks, axis=1) if blocks else np.zeros((len(rows), 0))


@lru_cache(maxsize=8)
def _text_encoder(width: int) -> HashingEmbedder:
    return HashingEmbedder(width)


def encode_labels(desc: Mapping, table: StructuredTable, rows: Sequence[int]) -> np.ndarray:
    j = table.index(desc["column"])
    cells = [table.cells[r][j] for r in rows]
    if desc["kind"] == "index_map":
        index = {c: i for i, c in enumerate(desc["classes"])}
        unknown = sorted({c for c in cells if c not in index})
        if unknown:
            raise RuntimeFailure(f"label value(s) {unknown[:5]} not seen in training split")
        return np.array([index[c] for c in cells], dtype=int)
    vals = np.array([_parse_float(c) for c in cells])
    if not np.all(np.isfinite(vals)):
        raise RuntimeFailure("regression labels must be numeric")
    return vals


def branch_projection(model: str, width: int, dim: int) -> np.ndarray:
    """Frozen stand-in for the branch's pretrained model: width -> dim.

    Identity when the widths agree; otherwise a Gaussian projection seeded
    from the model name.
    """
    if width == dim:
        return np.eye(width)
    seed = int.from_bytes(hashlib.blake2b(f"{model}|{width}|{dim}".encode(), digest_size=8).digest(), "little")
    return np.random.default_rng(seed).normal(size=(width, dim)) / math.sqrt(max(width, 1))


@dataclass
class ModalityBatch:
    features: list[np.ndarray]
    labels: np.ndarray
    engineered: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        sizes = {f.shape[0] for f in self.features} | {len(self.labels)}
        if len(sizes) > 1:
            raise ShapeMismatch(f"branches disagree on batch size: {sorted(sizes)}")
        for i, f in enumerate(self.features):
            if not np.all(np.isfinite(f)):
                raise RuntimeFailure(f"non-finite inputs in branch {i}")

    @property
    def size(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "ModalityBatch":
        return ModalityBatch([f[idx] for f in self.features], self.labels[idx],
                             [e[idx] for e in self.engineered] if self.engineered else [])


def encode_batch(table: StructuredTable, rows: Sequence[int], plan: ProcessorPlan, spec: FusionSpec,
                 data_root=None) -> ModalityBatch:
    rows = list(rows)
    features, engineered = [], []
    for b in spec.branches:
        desc = plan.processors.get(b.modality.value)
        if desc is None:
            raise ShapeMismatch(f"no processor for branch {b.modality.value!r}")
        x = apply_descriptor(desc, table, rows, data_root)
        engineered.append(x)
        features.append(x @ branch_projection(b.model, x.shape[1], b.feature_dim))
    labels = encode_labels(plan.label_processor, table, rows)
    return ModalityBatch(features, labels, engineered)


# ---------------------------------------------------------------------------
# Parameters, forward, loss, backward
# ---------------------------------------------------------------------------

Params = dict  # name -> ndarray


def init_params(spec: FusionSpec, seed: int = 0) -> Params:
    rng = np.random.default_rng([seed, 1])

    def dense(fan_in, fan_out):
        return rng.normal(size=(fan_in, fan_out)) / math.sqrt(fan_in), np.zeros(fan_out)

    p: Params = {}
    D, C = spec.max_dim, spec.output_dim
    for i, (d_in, d_out) in enumerate(spec.adapters):
        p[f"adapter{i}.W"], p[f"adapter{i}.b"] = dense(d_in, d_out)
        p[f"branch_head{i}.W"], p[f"branch_head{i}.b"] = dense(D, C)
    for k, (d_in, d_out) in enumerate(spec.body_dims):
        p[f"body{k}.W"], p[f"body{k}.b"] = dense(d_in, d_out)
    p["head.W"], p["head.b"] = dense(*spec.head_dims)
    return p


def zero_params(spec: FusionSpec) -> Params:
    return {k: np.zeros_like(v) for k, v in init_params(spec).items()}


@dataclass
class ForwardOutput:
    branch_features: list[np.ndarray]
    branch_logits: list[np.ndarray]
    fused: np.ndarray
    body_activations: list[np.ndarray]
    logits: np.ndarray
    inputs: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def fusion_features(self) -> np.ndarray:
        return self.body_activations[-1] if self.body_activations else self.fused


def forward(batch: ModalityBatch | Sequence[np.ndarray], spec: FusionSpec, params: Params) -> ForwardOutput:
    xs = batch.features if isinstance(batch, ModalityBatch) else list(batch)
    if len(xs) != spec.n_branches:
        raise ShapeMismatch(f"expected {spec.n_branches} branch inputs, got {len(xs)}")
    feats, blogits = [], []
    for i, (x, b) in enumerate(zip(xs, spec.branches)):
        if x.ndim != 2 or x.shape[1] != b.feature_dim:
            raise ShapeMismatch(f"branch {i} ({b.modality.value}/{b.model}): input shape {x.shape}, "
                                f"expected (batch, {b.feature_dim})")
        f = x @ params[f"adapter{i}.W"] + params[f"adapter{i}.b"]
        feats.append(f)
        blogits.append(f @ params[f"branch_head{i}.W"] + params[f"branch_head{i}.b"])
    fused = np.concatenate(feats, axis=1)
    acts, z = [], fused
    for k in range(len(spec.body_dims)):
        z = np.tanh(z @ params[f"body{k}.W"] + params[f"body{k}.b"])
        acts.append(z)
    logits = z @ params["head.W"] + params["head.b"]
    return ForwardOutput(feats, blogits, fused, acts, logits, list(xs))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def term_loss(logits: np.ndarray, labels: np.ndarray, task: str) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    if task == "regression":
        # overflow here surfaces as a non-finite loss, reported by the caller
        with np.errstate(over="ignore", invalid="ignore"):
            r = logits[:, 0] - labels
            grad = np.zeros_like(logits)
            grad[:, 0] = 2.0 * r / n
            return float(np.mean(r ** 2)), grad
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _weights(spec: FusionSpec, weights) -> tuple[float, tuple[float, ...]]:
    if weights is None:
        return spec.fusion_weight, spec.branch_weights
    w_f, *w_b = weights
    return float(w_f), tuple(float(w) for w in w_b)


def total_loss(output: ForwardOutput, labels: np.ndarray, spec: FusionSpec, task: str, weights=None) -> float:
    """w_f * loss(fused logits) + sum_i w_i * loss(branch i logits)."""
    w_f, w_b = _weights(spec, weights)
    fused, _ = term_loss(output.logits, labels, task)
    if not math.isfinite(fused):
        raise NonFiniteLoss("fusion")
    total = w_f * fused
    for i, (w, z) in enumerate(zip(w_b, output.branch_logits)):
        li, _ = term_loss(z, labels, task)
        if not math.isfinite(li):
            raise NonFiniteLoss(f"branch {i} ({spec.branches[i].model})")
        total += w * li
    return total


def loss_and_grads(batch: ModalityBatch, spec: FusionSpec, params: Params, task: str,
                   weights=None) -> tuple[float, Params]:
    out = forward(batch, spec, params)
    w_f, w_b = _weights(spec, weights)
    y = batch.labels
    grads: Params = {}
    loss_f, g = term_loss(out.logits, y, task)
    loss = w_f * loss_f
    g = w_f * g
    if not math.isfinite(loss_f):
        raise NonFiniteLoss("fusion")

    last = out.fusion_features
    grads["head.W"] = last.T @ g
    grads["head.b"] = g.sum(axis=0)
    g = g @ params["head.W"].T
    for k in reversed(range(len(spec.body_dims))):
        a = out.body_activations[k]
        g = g * (1.0 - a ** 2)
        prev = out.body_activations[k - 1] if k > 0 else out.fused
        grads[f"body{k}.W"] = prev.T @ g
        grads[f"body{k}.b"] = g.sum(axis=0)
        g = g @ params[f"body{k}.W"].T

    D = spec.max_dim
    for i in range(spec.n_branches):
        g_f = g[:, i * D:(i + 1) * D]
        li, gl = term_loss(out.branch_logits[i], y, task)
        if not math.isfinite(li):
            raise NonFiniteLoss(f"branch {i} ({spec.branches[i].model})")
        loss += w_b[i] * li
        gl = w_b[i] * gl
        f = out.branch_features[i]
        grads[f"branch_head{i}.W"] = f.T @ gl
        grads[f"branch_head{i}.b"] = gl.sum(axis=0)
        g_f = g_f + gl @ params[f"branch_head{i}.W"].T
        grads[f"adapter{i}.W"] = out.inputs[i].T @ g_f
        grads[f"adapter{i}.b"] = g_f.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean(y_true == y_pred))


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true, dtype=float), np.asarray(y_pred, dtype=float)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def auc(y_true, scores) -> float:
    """ROC AUC via the Mann-Whitney rank statistic; tied scores count half."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=float)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise RuntimeFailure("AUC is undefined when only one class is present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pair_auc(embeddings: np.ndarray, groups: np.ndarray, max_pairs: int = 20000, seed: int = 0) -> float:
    """AUC of cosine similarity for same-group vs different-group row pairs."""
    n = len(groups)
    iu, ju = np.triu_indices(n, k=1)
    if iu.size > max_pairs:
        keep = np.random.default_rng(seed).choice(iu.size, size=max_pairs, replace=False)
        iu, ju = iu[keep], ju[keep]
    norms = np.linalg.norm(embeddings, axis=1)
    norms = np.where(norms == 0, 1.0, norms)
    unit = embeddings / norms[:, None]
    sims = np.sum(unit[iu] * unit[ju], axis=1)
    return auc(groups[iu] == groups[ju], sims)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 40
    seed: int = 0
    task: str = "binary"
    # (w_f, w_1, ..., w_n); None keeps the FusionSpec weights
    loss_weights: tuple | None = None
    # shared weight for every branch term; the fusion term keeps its weight
    loss_weight: float | None = None
    hidden_size: int | None = None
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise RuntimeFailure("learning_rate must be positive")
        if self.batch_size < 1:
            raise RuntimeFailure("batch_size must be >= 1")
        if self.epochs < 0:
            raise RuntimeFailure("epochs must be >= 0")
        metric_for(self.task)

    def overlay(self, assignment: Mapping) -> "TrainConfig":
        """Apply a flat hyperparameter assignment (HPO trial) to this config."""
        changes = {}
        for name, value in assignment.items():
            if name == "learning_rate":
                changes[name] = float(value)
            elif name in ("batch_size", "epochs", "hidden_size"):
                changes[name] = int(value)
            elif name == "loss_weight":
                changes[name] = float(value)
            elif name == "seed":
                changes[name] = int(value)
            else:
                raise RuntimeFailure(f"hyperparameter {name!r} is not a training setting")
        return replace(self, **changes)

    def to_flat(self) -> dict:
        doc = {"learning_rate": self.learning_rate, "batch_size": self.batch_size, "epochs": self.epochs,
               "hidden_size": self.hidden_size, "loss_weight": self.loss_weight}
        return {k: v for k, v in doc.items() if v is not None}

    def resolve_spec(self, spec: FusionSpec) -> FusionSpec:
        if self.hidden_size is not None:
            spec = spec.with_hidden([self.hidden_size] * max(len(spec.hidden_widths), 1))
        if self.loss_weights is not None:
            w_f, *w_b = self.loss_weights
            spec = spec.with_weights(w_b, w_f)
        if self.loss_weight is not None:
            spec = spec.with_weights([self.loss_weight] * spec.n_branches)
        return spec


@dataclass(frozen=True)
class Dataset:
    table: StructuredTable
    data_root: str | None = None

    def split(self, seed: int, val_fraction: float = 0.2) -> tuple[list[int], list[int]]:
        n = self.table.n_rows
        perm = np.random.default_rng([seed, 3]).permutation(n)
        n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
        return sorted(int(i) for i in perm[n_val:]), sorted(int(i) for i in perm[:n_val])


@dataclass
class TrainedModel:
    spec: FusionSpec
    plan: ProcessorPlan
    params: Params
    task: str
    history: list[dict] = field(default_factory=list)
    train_rows: list[int] = field(default_factory=list)
    val_rows: list[int] = field(default_factory=list)

    def predict_logits(self, batch: ModalityBatch) -> np.ndarray:
        return forward(batch, self.spec, self.params).logits


def evaluate_batch(model_spec: FusionSpec, params: Params, batch: ModalityBatch, task: str,
                   metric: str | None = None, seed: int = 0) -> float:
    metric = metric or metric_for(task)
    out = forward(batch, model_spec, params)
    y = batch.labels
    if metric == "rmse":
        return rmse(y, out.logits[:, 0])
    if metric == "accuracy":
        return accuracy(y, out.logits.argmax(axis=1))
    if metric == "auc":
        if task == "retrieval_pairs":
            return pair_auc(out.fusion_features, y, seed=seed)
        if out.logits.shape[1] < 2:
            raise RuntimeFailure("binary AUC needs two logits")
        return auc(y == out.logits.shape[1] - 1, np.exp(_log_softmax(out.logits))[:, -1])
    raise RuntimeFailure(f"unknown metric {metric!r}")


def evaluate(model: TrainedModel, dataset: Dataset, rows: Sequence[int] | None = None,
             metric: str | None = None) -> float:
    rows = model.val_rows if rows is None else list(rows)
    batch = encode_batch(dataset.table, rows, model.plan, model.spec, dataset.data_root)
    return evaluate_batch(model.spec, model.params, batch, model.task, metric)


def _mean_loss(batch, spec, params, task):
    return total_loss(forward(batch, spec, params), batch.labels, spec, task)


def train(dataset: Dataset, spec: FusionSpec, plan: ProcessorPlan, config: TrainConfig,
          metric: str | None = None) -> TrainedModel:
    """Seeded minibatch gradient descent; history holds one row per epoch."""
    spec = config.resolve_spec(spec)
    train_rows, val_rows = dataset.split(config.seed, config.val_fraction)
    fitted = plan.fit(dataset.table, train_rows, dataset.data_root)
    tr = encode_batch(dataset.table, train_rows, fitted, spec, dataset.data_root)
    va = encode_batch(dataset.table, val_rows, fitted, spec, dataset.data_root)
    params = init_params(spec, config.seed)
    model = TrainedModel(spec, fitted, params, config.task, [], train_rows, val_rows)
    rng = np.random.default_rng([config.seed, 2])
    metric = metric or metric_for(config.task)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(tr.size)
        for start in range(0, tr.size, config.batch_size):
            mb = tr.take(order[start:start + config.batch_size])
            try:
                loss, grads = loss_and_grads(mb, spec, params, config.task)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(epoch, exc.term) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            for k, g in grads.items():
                params[k] -= config.learning_rate * g
        with np.errstate(over="ignore", invalid="ignore"):
            finite = all(np.all(np.isfinite(v)) for v in params.values())
        if not finite:
            raise TrainingDiverged(epoch, "parameters")
        try:
            train_loss = _mean_loss(tr, spec, params, config.task)
            val_loss = _mean_loss(va, spec, params, config.task)
        except NonFiniteLoss as exc:
            raise TrainingDiverged(epoch, exc.term) from exc
        value = evaluate_batch(spec, params, va, config.task, metric, seed=config.seed)
        model.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "metric": value})
    return model


def final_metric(model: TrainedModel, dataset: Dataset, metric: str | None = None) -> float:
    return evaluate(model, dataset, model.val_rows, metric)


def write_history(history: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "metric"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["metric"])])
    return path


def save_params(params: Params, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **params)
    return path


def load_params(path) -> Params:
    with np.load(path) as data:
        return {k: data[k].copy() for k in data.files}
