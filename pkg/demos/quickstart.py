"""Quickstart: synthesise a pet-adoption table and run every stage on it.

The chat endpoint is the bundled scripted responder, so the demo runs offline.
Swap ``transport=`` for nothing and point ``[gateway]`` at a real endpoint to
use a live model instead.

    python demos/quickstart.py [--out DIR]
"""

import argparse
import json
import tempfile
from pathlib import Path

from tablefuse import pipeline, table
from tablefuse.testing import ScriptedLLM

CONFIG = """\
[data]
table = "data/table.csv"
label_column = "adopted"
task = "binary"

[directives]
modality = "Predict whether a pet listed for adoption gets adopted."
hpo = "Keep the search small."

[gateway]
mode = "record"
fixtures = "fixtures.json"

[output]
dir = "run"

[assemble]
generate_code = true

[train]
learning_rate = 0.1
batch_size = 32
epochs = 30
loss_weight = 1.0
"""


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    root = args.out or Path(tempfile.mkdtemp(prefix="tablefuse-quickstart-"))
    root.mkdir(parents=True, exist_ok=True)

    data = root / "data"
    data.mkdir(exist_ok=True)
    t = table.generate_synthetic_dataset(500, 7, sidecar_dir=data)
    table.save_table(t, data / "table.csv")
    (root / "run.toml").write_text(CONFIG)

    config = pipeline.load_run_config(root / "run.toml")
    run = pipeline.Run(config, transport=ScriptedLLM().transport())
    report = run.run_all()

    print(f"run directory: {run.dir}")
    print("selected models:")
    for modality, name in report["selected_models"].items():
        print(f"  {modality:<12} {name}")
    print("fusion:", json.dumps(report["fusion"]))
    print("best hyperparameters:", report["best_hyperparameters"])
    print(f"{report['metric_name']} = {report['final_metric']:.4f}, metrics = {report['metrics']}")
    print("artifacts:", ", ".join(sorted(p.name for p in run.dir.iterdir())))
    print(f"replay the same run offline with: tablefuse run --config {root / 'run.toml'} --mode replay")


if __name__ == "__main__":
    main()
