"""Shared builders for end-to-end runs and fixture recording.

The datasets, configs and directives here must stay byte-stable: the
committed fixtures under ``tests/fixtures`` are keyed by prompt hashes
that depend on them. After changing anything here, re-record with
``python scripts/record_fixtures.py``.
"""

from __future__ import annotations

from pathlib import Path

from tablefuse import pipeline, table
from tablefuse.llm.gateway import FixtureStore, Gateway, GatewayConfig
from tablefuse.testing import ScriptedLLM

FIXTURES = Path(__file__).parent / "fixtures"
CLEAN_FIXTURES = FIXTURES / "clean.fixtures.json"
CORRUPTED_FIXTURES = FIXTURES / "corrupted.fixtures.json"
ROBUSTNESS_FIXTURES = FIXTURES / "robustness.fixtures.json"

N_ROWS = 500
DATA_SEED = 7
CORRUPT_SEED = 11
MASK_FRACTION = 0.2
NOISE_COLUMNS = 3

DIRECTIVES = {
    "modality": "Predict whether a pet listed for adoption gets adopted.",
    "filter": "Predict pet adoption; drop columns that say nothing about the pet.",
    "impute": "Pet adoption listings.",
    "select": "",
    "hpo": "Keep the search small.",
}

# Ten rewordings of one lightweight-deployment request.
LIGHTWEIGHT_DIRECTIVES = [
    "I hope to see the model efficiently running on mobile devices, optimizing for lightweight performance.",
    "The model's deployment on CPU devices, especially on lightweight and mobile platforms, is my preference.",
    "My goal is to have the model effectively deployed on CPU devices, with a focus on mobile and lightweight "
    "configurations.",
    "It would be great to have the model running seamlessly on various CPU devices, prioritizing mobility and "
    "lightweight hardware.",
    "I'm aiming for the model to be deployed on specific CPU hardware, emphasizing mobility and lightweight "
    "characteristics.",
    "Optimizing the model for mobile platforms and ensuring efficient operation on CPU devices aligns with my "
    "preferences.",
    "The deployment of the model on CPU devices, particularly on lightweight and mobile configurations, is my "
    "desired outcome.",
    "I'm specifically interested in the model's deployment on CPU devices, emphasizing efficiency and suitability "
    "for mobile platforms.",
    "My preference is for the model to be tailored for deployment on CPU devices, with a keen focus on mobile and "
    "lightweight capabilities.",
    "Ensuring the model's inference speed on CPU devices, especially in mobile and lightweight scenarios, is my "
    "priority.",
]
LIGHTWEIGHT_MAP = {
    "numerical": "numerical_mlp",
    "categorical": "categorical_mlp",
    "text": "google/flan-t5-small",
    "image_path": "mobilenetv3_large_100",
}


def _toml_str(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_dataset(root: Path) -> Path:
    """Clean synthetic table plus image sidecars under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    t = table.generate_synthetic_dataset(N_ROWS, DATA_SEED, sidecar_dir=root)
    return table.save_table(t, root / "table.csv")


def write_corrupted(root: Path) -> tuple[Path, table.CorruptionPlan]:
    clean = table.load_table(write_dataset(root), table.SYNTHETIC_LABEL)
    corrupted, plan = table.corrupt(clean, MASK_FRACTION, NOISE_COLUMNS, CORRUPT_SEED)
    return table.save_table(corrupted, root / "corrupted.csv"), plan


def write_config(path: Path, table_path: Path, out_dir: Path, fixtures: Path, *, mode: str = "replay",
                 feature_engineering: bool = True, directives: dict | None = None,
                 generate_code: bool = True, extra: str = "") -> Path:
    d = dict(DIRECTIVES)
    d.update(directives or {})
    lines = [
        "[data]",
        f"table = {_toml_str(str(table_path))}",
        f"label_column = {_toml_str(table.SYNTHETIC_LABEL)}",
        'task = "binary"',
        "",
        "[directives]",
        *(f"{k} = {_toml_str(v)}" for k, v in d.items()),
        "",
        "[gateway]",
        f"mode = {_toml_str(mode)}",
        f"fixtures = {_toml_str(str(fixtures))}",
        "",
        "[output]",
        f"dir = {_toml_str(str(out_dir))}",
        "",
        "[seeds]",
        "sample = 0",
        "train = 0",
        "search = 0",
        "",
        "[train]",
        "learning_rate = 0.1",
        "batch_size = 32",
        "epochs = 30",
        "loss_weight = 1.0",
        "",
        "[hpo]",
        'strategy = "grid"',
        "",
        "[features]",
        f"enabled = {'true' if feature_engineering else 'false'}",
        "",
        "[assemble]",
        f"generate_code = {'true' if generate_code else 'false'}",
        "",
        extra,
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def clean_project(tmp: Path, mode: str = "replay", fixtures: Path = CLEAN_FIXTURES) -> Path:
    data = write_dataset(tmp / "data")
    return write_config(tmp / "run.toml", data, tmp / "run", fixtures, mode=mode)


def corrupted_project(tmp: Path, *, feature_engineering: bool, mode: str = "replay",
                      fixtures: Path = CORRUPTED_FIXTURES, out: str = "run") -> Path:
    data, _ = write_corrupted(tmp / "data")
    return write_config(tmp / f"{out}.toml", data, tmp / out, fixtures, mode=mode,
                        feature_engineering=feature_engineering)


def recording_run(config_path: Path, responder: ScriptedLLM) -> pipeline.Run:
    config = pipeline.load_run_config(config_path)
    gateway = Gateway(config.gateway, FixtureStore(config.fixtures), transport=responder.transport())
    return pipeline.Run(config, gateway=gateway)


def selection_gateway(fixtures: Path, mode: str = "replay", transport=None) -> Gateway:
    return Gateway(GatewayConfig(mode=mode), FixtureStore(fixtures), transport=transport)


def schema_for_selection():
    from tablefuse.modality import ModalitySchema
    mods = table.synthetic_schema()
    return ModalitySchema(mods, {c: "llm" for c in mods})


def select_with_directive(gateway: Gateway, directive: str) -> dict[str, str]:
    from tablefuse import zoo
    schema = schema_for_selection()
    desc = zoo.describe_data("binary", table.SYNTHETIC_LABEL, schema, "auc")
    picks = zoo.select_per_modality(zoo.builtin_zoo(gateway), schema, table.SYNTHETIC_LABEL, desc, directive)
    return {m.value: s.name for m, s in picks.items()}


def record_all(workdir: Path) -> dict[str, int]:
    """Re-record every committed fixture file from the scripted responder."""
    for f in (CLEAN_FIXTURES, CORRUPTED_FIXTURES, ROBUSTNESS_FIXTURES):
        f.unlink(missing_ok=True)
    FIXTURES.mkdir(parents=True, exist_ok=True)

    recording_run(clean_project(workdir / "clean", mode="record"), ScriptedLLM()).run_all()

    data, plan = write_corrupted(workdir / "corrupted" / "data")
    corrupted = table.load_table(data, table.SYNTHETIC_LABEL)
    responder = ScriptedLLM(filter_drop={name for name, _ in plan.noise_columns}, reference=corrupted)
    for enabled, out in ((True, "afe"), (False, "control")):
        cfg = corrupted_project(workdir / "corrupted", feature_engineering=enabled, mode="record", out=out)
        recording_run(cfg, responder).run_all()

    gw = selection_gateway(ROBUSTNESS_FIXTURES, mode="record", transport=ScriptedLLM().transport())
    for directive in LIGHTWEIGHT_DIRECTIVES:
        select_with_directive(gw, directive)
    return {f.name: len(FixtureStore(f)) for f in (CLEAN_FIXTURES, CORRUPTED_FIXTURES, ROBUSTNESS_FIXTURES)}
