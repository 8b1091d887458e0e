"""Stage orchestration over an on-disk run directory.

Every stage reads its prerequisites from the run directory and writes its
own artifact there, so a user can inspect or hand-edit ``schema.json`` or
``selections.json`` between stages and re-run from that point.

Run directory layout::

    schema.json          modality inference
    afe_report.json      feature filtering + imputation report
    engineered.csv       table after feature engineering
    selections.json      one model per feature modality
    pipeline.json        fusion spec + processor plan
    generated_fusion.txt optional generated fusion source (never executed)
    code_validation.json structural checks of the generated source
    hpo_descriptions.json, hpo_space.json
    trials.csv, best.json
    params.npz, fitted_processors.json, history.csv, metrics.json
    evaluation.json
    report.json          final summary (``run`` only)
    run.log              human-readable log with the models' reasons
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from . import assembly, features, hpo, modality, runtime, zoo
from .llm.gateway import FixtureStore, Gateway, GatewayConfig
from .table import Modality, StructuredTable, load_table, save_table

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("infer-modalities", "engineer-features", "select", "assemble", "hpo-propose", "hpo-run", "train",
          "evaluate")
DEFAULT_TRAIN = {"learning_rate": 0.1, "batch_size": 32, "epochs": 40, "hidden_size": 32, "loss_weight": 1.0}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class MissingPrerequisite(StageError):
    def __init__(self, stage: str, artifact: str):
        super().__init__(stage, f"missing prerequisite artifact {artifact}")
        self.artifact = artifact


@dataclass
class RunConfig:
    table: Path
    label_column: str
    task: str
    output_dir: Path
    directives: dict = field(default_factory=dict)
    data_root: Path | None = None
    zoo_dir: Path | None = None
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    fixtures: Path | None = None
    seeds: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: dict(DEFAULT_TRAIN))
    hpo: dict = field(default_factory=dict)
    modality_overrides: dict = field(default_factory=dict)
    feature_engineering: bool = True
    generate_code: bool = False
    metric: str | None = None

    def directive(self, stage: str) -> str:
        return self.directives.get(stage, "") or ""

    def seed(self, name: str) -> int:
        return int(self.seeds.get(name, 0))

    @property
    def root(self) -> Path:
        return self.data_root if self.data_root is not None else self.table.parent

    @property
    def metric_name(self) -> str:
        return self.metric or runtime.metric_for(self.task)

    def train_config(self) -> runtime.TrainConfig:
        t = self.train
        return runtime.TrainConfig(
            learning_rate=float(t.get("learning_rate", DEFAULT_TRAIN["learning_rate"])),
            batch_size=int(t.get("batch_size", DEFAULT_TRAIN["batch_size"])),
            epochs=int(t.get("epochs", DEFAULT_TRAIN["epochs"])),
            hidden_size=int(t["hidden_size"]) if "hidden_size" in t else None,
            loss_weight=float(t["loss_weight"]) if "loss_weight" in t else None,
            seed=self.seed("train"),
            task=self.task,
        )


def _resolve(base: Path, value) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def run_config_from_mapping(doc: Mapping, base: Path = Path(".")) -> RunConfig:
    data = doc.get("data", {})
    missing = [k for k in ("table", "label_column", "task") if not data.get(k)]
    if missing:
        raise ConfigError(f"config [data] is missing required key(s): {', '.join(missing)}")
    task = data["task"]
    if task not in runtime.TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {runtime.TASKS}")
    out = doc.get("output", {}).get("dir")
    if not out:
        raise ConfigError("config [output] dir is required")
    gw = dict(doc.get("gateway", {}))
    fixtures = _resolve(base, gw.pop("fixtures", None))
    gw_config = GatewayConfig(**{k: v for k, v in gw.items() if k in GatewayConfig.__dataclass_fields__})
    if gw_config.mode in ("replay", "record") and fixtures is None:
        raise ConfigError(f"gateway mode {gw_config.mode!r} needs a fixtures path")
    train_doc = dict(DEFAULT_TRAIN)
    train_doc.update(doc.get("train", {}))
    features_doc = doc.get("features", {})
    return RunConfig(
        table=_resolve(base, data["table"]),
        label_column=data["label_column"],
        task=task,
        output_dir=_resolve(base, out),
        directives=dict(doc.get("directives", {})),
        data_root=_resolve(base, data.get("data_root")),
        zoo_dir=_resolve(base, doc.get("zoo", {}).get("dir")),
        gateway=gw_config,
        fixtures=fixtures,
        seeds=dict(doc.get("seeds", {})),
        train=train_doc,
        hpo=dict(doc.get("hpo", {})),
        modality_overrides=dict(doc.get("modality_overrides", {})),
        feature_engineering=bool(features_doc.get("enabled", True)),
        generate_code=bool(doc.get("assemble", {}).get("generate_code", False)),
        metric=data.get("metric"),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    with path.open("rb") as fh:
        doc = tomllib.load(fh)
    return run_config_from_mapping(doc, path.parent)


class Run:
    """One run directory plus the services the stages share."""

    def __init__(self, config: RunConfig, gateway: Gateway | None = None, transport=None):
        self.config = config
        self.dir = Path(config.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        if gateway is None:
            store = FixtureStore(config.fixtures) if config.fixtures is not None else FixtureStore()
            gateway = Gateway(config.gateway, store, transport=transport)
        self.gateway = gateway
        self._zoo = None

    # -- helpers -------------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.dir / name

    def note(self, stage: str, message: str) -> None:
        with self.path("run.log").open("a", encoding="utf-8") as fh:
            fh.write(f"[{stage}] {message}\n")
        log.info("[%s] %s", stage, message)

    def write_json(self, name: str, doc) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
        return p

    def read_json(self, stage: str, name: str):
        p = self.path(name)
        if not p.exists():
            raise MissingPrerequisite(stage, name)
        return json.loads(p.read_text(encoding="utf-8"))

    def require(self, stage: str, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingPrerequisite(stage, name)
        return p

    @property
    def zoo(self) -> zoo.ModelZoo:
        if self._zoo is None:
            if self.config.zoo_dir is not None:
                self._zoo = zoo.ModelZoo.load(self.config.zoo_dir, self.gateway)
            else:
                self._zoo = zoo.builtin_zoo(self.gateway)
        return self._zoo

    def raw_table(self) -> StructuredTable:
        return load_table(self.config.table, self.config.label_column)

    def engineered_table(self, stage: str) -> StructuredTable:
        return load_table(self.require(stage, "engineered.csv"), self.config.label_column)

    def schema(self, stage: str) -> modality.ModalitySchema:
        return modality.ModalitySchema.from_json(self.read_json(stage, "schema.json"))

    def dataset(self, stage: str) -> runtime.Dataset:
        return runtime.Dataset(self.engineered_table(stage), str(self.config.root))

    def pipeline(self, stage: str):
        return assembly.load_pipeline_document(self.read_json(stage, "pipeline.json"))

    def output_dim(self, stage: str, table: StructuredTable) -> int:
        if self.config.task == "regression":
            return 1
        return len(set(table.column(self.config.label_column)))

    # -- stages --------------------------------------------------------------

    def infer_modalities(self) -> modality.ModalitySchema:
        stage = "infer-modalities"
        table = self.raw_table()
        schema = modality.infer_modalities(
            table, self.config.directive("modality"), self.gateway,
            overrides=self.config.modality_overrides, task=self.config.task,
            seed=self.config.seed("sample"),
        )
        self.write_json("schema.json", schema.to_json())
        self.note(stage, "modalities: " + ", ".join(f"{c}={m.value}" for c, m in schema.modalities.items()))
        return schema

    def engineer_features(self) -> dict:
        stage = "engineer-features"
        schema = self.schema(stage)
        table = self.raw_table()
        if not self.config.feature_engineering:
            save_table(table, self.path("engineered.csv"))
            report = {"skipped": True, "retained": table.feature_columns, "dropped": [], "reinstated": [],
                      "filled": [], "unresolved": []}
            self.write_json("afe_report.json", report)
            self.note(stage, "feature engineering disabled; table passed through unchanged")
            return report
        result = features.filter_features(table, schema, self.config.directive("filter"), self.gateway)
        filtered = features.apply_filter(table, result)
        imputed, imp = features.impute_table(filtered, schema, self.config.directive("impute"), self.gateway,
                                             seed=self.config.seed("sample"),
                                             max_in_flight=4)
        save_table(imputed, self.path("engineered.csv"))
        report = {"skipped": False, **features.engineering_report(result, imp)}
        self.write_json("afe_report.json", report)
        self.note(stage, f"retained {list(result.retained)}; dropped {list(result.dropped)}; "
                         f"reinstated {list(result.reinstated)}")
        self.note(stage, f"imputed {len(imp.filled)} cell(s); {len(imp.unresolved)} unresolved")
        return report

    def select(self) -> dict:
        stage = "select"
        table = self.engineered_table(stage)
        schema = self.schema(stage).restrict(table.columns)
        desc = zoo.describe_data(self.config.task, self.config.label_column, schema, self.config.metric_name)
        picks = zoo.select_per_modality(self.zoo, schema, self.config.label_column, desc,
                                        self.config.directive("select"))
        doc = {"data_description": desc, "selections": {m.value: s.to_json() for m, s in picks.items()}}
        self.write_json("selections.json", doc)
        for m, s in picks.items():
            self.note(stage, f"{m.value}: {s.name} (reason: {s.reason})")
        return doc

    def _selections(self, stage: str) -> dict[Modality, zoo.SelectionResult]:
        doc = self.read_json(stage, "selections.json")
        return {Modality(m): zoo.SelectionResult.from_json(s) for m, s in doc["selections"].items()}

    def assemble(self) -> dict:
        stage = "assemble"
        selections = self._selections(stage)
        table = self.engineered_table(stage)
        schema = self.schema(stage).restrict(table.columns)
        spec = assembly.build_fusion_spec(selections, self.zoo.by_name, self.output_dim(stage, table))
        plan = assembly.build_processor_plan(schema, selections, self.config.label_column, self.config.task,
                                             self.zoo.by_name)
        doc = assembly.pipeline_document(spec, plan, self.config.task, self.config.label_column)
        self.write_json("pipeline.json", doc)
        self.note(stage, f"branches {[(b.modality.value, b.model, b.feature_dim) for b in spec.branches]}; "
                         f"D={spec.max_dim}; concat={spec.concat_dim}")
        if self.config.generate_code:
            artifact = assembly.generate_code_artifact(spec, self.zoo.by_name, self.gateway)
            self.path("generated_fusion.txt").write_text(artifact.text, encoding="utf-8")
            self.write_json("code_validation.json", artifact.report())
            self.note(stage, f"generated fusion code checks: {artifact.report()['checks']}")
        return doc

    def hpo_config(self) -> dict:
        return dict(self.config.train)

    def hpo_propose(self) -> hpo.HPOSpace:
        stage = "hpo-propose"
        self.require(stage, "pipeline.json")
        config = self.hpo_config()
        descriptions, missing = hpo.describe_hyperparameters(config, self.gateway)
        self.write_json("hpo_descriptions.json", {"descriptions": descriptions, "missing": missing})
        space = hpo.propose_search_space(config, descriptions, self.config.directive("hpo"), self.gateway)
        self.write_json("hpo_space.json", space.to_json())
        self.note(stage, f"search space {space.to_json()}")
        return space

    def _objective(self, stage: str):
        spec, plan = self.pipeline(stage)
        data = self.dataset(stage)
        metric = self.config.metric_name

        def objective(cfg: runtime.TrainConfig) -> float:
            model = runtime.train(data, spec, plan, cfg, metric=metric)
            return runtime.final_metric(model, data, metric)

        return objective

    def hpo_run(self) -> hpo.SearchResult:
        stage = "hpo-run"
        space = hpo.HPOSpace.from_json(self.read_json(stage, "hpo_space.json"))
        h = self.config.hpo
        result = hpo.run_search(space, self.config.train_config(), self._objective(stage),
                                metric=self.config.metric_name, trials=int(h.get("trials", 8)),
                                strategy=h.get("strategy", "grid"), seed=self.config.seed("search"),
                                parallelism=int(h.get("parallelism", 1)))
        hpo.write_trials(result, self.path("trials.csv"))
        self.write_json("best.json", hpo.best_document(result))
        self.note(stage, f"{len(result.records)} trial(s); best #{result.best.index} "
                         f"{result.best.assignment} {result.metric}={result.best.metric:.6g}")
        return result

    def final_train_config(self) -> runtime.TrainConfig:
        cfg = self.config.train_config()
        best = self.path("best.json")
        if best.exists():
            cfg = cfg.overlay(json.loads(best.read_text())["assignment"])
        return cfg

    def train(self) -> dict:
        stage = "train"
        spec, plan = self.pipeline(stage)
        data = self.dataset(stage)
        cfg = self.final_train_config()
        model = runtime.train(data, spec, plan, cfg, metric=self.config.metric_name)
        runtime.save_params(model.params, self.path("params.npz"))
        self.write_json("fitted_processors.json", {"spec": model.spec.to_json(), "plan": model.plan.to_json(),
                                                   "train_rows": model.train_rows, "val_rows": model.val_rows})
        runtime.write_history(model.history, self.path("history.csv"))
        metrics = self._metrics(model, data)
        self.write_json("metrics.json", metrics)
        self.note(stage, f"trained {cfg.epochs} epoch(s): {metrics}")
        return metrics

    def _metrics(self, model: runtime.TrainedModel, data: runtime.Dataset) -> dict:
        out = {self.config.metric_name: runtime.final_metric(model, data, self.config.metric_name)}
        if self.config.task in ("binary", "multiclass") and "accuracy" not in out:
            out["accuracy"] = runtime.final_metric(model, data, "accuracy")
        return out

    def load_model(self, stage: str) -> runtime.TrainedModel:
        doc = self.read_json(stage, "fitted_processors.json")
        params = runtime.load_params(self.require(stage, "params.npz"))
        return runtime.TrainedModel(assembly.FusionSpec.from_json(doc["spec"]),
                                    assembly.ProcessorPlan.from_json(doc["plan"]), params, self.config.task,
                                    [], doc["train_rows"], doc["val_rows"])

    def evaluate(self) -> dict:
        stage = "evaluate"
        model = self.load_model(stage)
        metrics = self._metrics(model, self.dataset(stage))
        self.write_json("evaluation.json", metrics)
        self.note(stage, f"validation metrics: {metrics}")
        return metrics

    # -- orchestration ---------------------------------------------------------

    def run_stage(self, name: str):
        handler = {
            "infer-modalities": self.infer_modalities,
            "engineer-features": self.engineer_features,
            "select": self.select,
            "assemble": self.assemble,
            "hpo-propose": self.hpo_propose,
            "hpo-run": self.hpo_run,
            "train": self.train,
            "evaluate": self.evaluate,
        }[name]
        try:
            return handler()
        except StageError:
            raise
        except (ValueError, RuntimeError, OSError) as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc

    def run_all(self) -> dict:
        self.path("run.log").write_text("", encoding="utf-8")
        for name in STAGES:
            self.run_stage(name)
        selections = self.read_json("report", "selections.json")["selections"]
        spec, _ = self.pipeline("report")
        best = self.read_json("report", "best.json")
        metrics = self.read_json("report", "metrics.json")
        report = {
            "selected_models": {m: s["name"] for m, s in selections.items()},
            "fusion": {"branch_dims": [b.feature_dim for b in spec.branches], "max_dim": spec.max_dim,
                       "concat_dim": spec.concat_dim, "hidden_widths": list(spec.hidden_widths),
                       "output_dim": spec.output_dim},
            "best_hyperparameters": best["assignment"],
            "metric_name": self.config.metric_name,
            "final_metric": metrics[self.config.metric_name],
            "metrics": metrics,
        }
        self.write_json("report.json", report)
        self.note("run", f"final {self.config.metric_name}={report['final_metric']:.6g}")
        return report
