"""Mask 20% of cells, add three noise columns, then train with and without
automatic feature engineering (filtering plus imputation).

    python demos/corruption_robustness.py
"""

import json
import tempfile
from pathlib import Path

from tablefuse import pipeline, table
from tablefuse.testing import ScriptedLLM

TEMPLATE = """\
[data]
table = "{table}"
label_column = "adopted"
task = "binary"

[directives]
filter = "Predict pet adoption; drop columns that say nothing about the pet."

[gateway]
mode = "record"
fixtures = "fixtures.json"

[output]
dir = "{out}"

[features]
enabled = {enabled}

[train]
epochs = 30
loss_weight = 1.0
"""


def run(root: Path, name: str, table_path: str, enabled: bool, responder: ScriptedLLM) -> dict:
    cfg = root / f"{name}.toml"
    cfg.write_text(TEMPLATE.format(table=table_path, out=name, enabled=str(enabled).lower()))
    r = pipeline.Run(pipeline.load_run_config(cfg), transport=responder.transport())
    report = r.run_all()
    return report


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="tablefuse-robustness-"))
    data = root / "data"
    data.mkdir()
    clean = table.generate_synthetic_dataset(500, 7, sidecar_dir=data)
    table.save_table(clean, data / "clean.csv")
    noisy, plan = table.corrupt(clean, 0.2, 3, 11)
    table.save_table(noisy, data / "corrupted.csv")
    print("noise columns:", [name for name, _ in plan.noise_columns])
    print("masked cells:", len(plan.masked_positions))

    # the responder is told which columns a sensible model would drop, and
    # answers imputation prompts from nearest neighbours in the corrupted table
    responder = ScriptedLLM(filter_drop=[name for name, _ in plan.noise_columns], reference=noisy)
    results = {
        "clean": run(root, "clean", "data/clean.csv", True, responder),
        "corrupted + feature engineering": run(root, "afe", "data/corrupted.csv", True, responder),
        "corrupted, no feature engineering": run(root, "control", "data/corrupted.csv", False, responder),
    }
    for label, rep in results.items():
        print(f"{label:<36} accuracy={rep['metrics']['accuracy']:.3f} auc={rep['metrics']['auc']:.3f}")
    afe = json.loads((root / "afe" / "afe_report.json").read_text())
    print("dropped by the filter:", afe["dropped"])
    print("imputed cells:", len(afe["filled"]), "unresolved:", len(afe["unresolved"]))
    print("run directories under", root)


if __name__ == "__main__":
    main()
