"""Command-line entry point: one subcommand per stage plus ``run``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline, table, zoo
from .llm.gateway import FixtureStore, Gateway, GatewayConfig

STAGE_COMMANDS = {
    "infer-modalities": "infer-modalities",
    "engineer-features": "engineer-features",
    "select": "select",
    "assemble": "assemble",
    "train": "train",
    "evaluate": "evaluate",
}


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration (TOML)")
    p.add_argument("--mode", choices=("live", "record", "replay"), help="override the gateway mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tablefuse", description="LLM-steered multimodal AutoML over tables.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in STAGE_COMMANDS:
        _add_config(sub.add_parser(name, help=f"run the {name} stage"))

    hpo = sub.add_parser("hpo", help="search-space proposal and search")
    hsub = hpo.add_subparsers(dest="hpo_command", required=True)
    _add_config(hsub.add_parser("propose", help="ask for a search space; writes hpo_space.json"))
    _add_config(hsub.add_parser("run", help="run the search; writes trials.csv and best.json"))

    _add_config(sub.add_parser("run", help="all stages in order, then report.json"))

    zp = sub.add_parser("zoo", help="manage a model zoo directory")
    zsub = zp.add_subparsers(dest="zoo_command", required=True)
    z_init = zsub.add_parser("init", help="copy the bundled cards into a new zoo directory")
    z_init.add_argument("dir")
    z_add = zsub.add_parser("add", help="add a card JSON file to a zoo")
    z_add.add_argument("card")
    z_add.add_argument("--zoo", required=True, dest="zoo_dir")
    z_list = zsub.add_parser("list", help="list cards")
    z_list.add_argument("--zoo", dest="zoo_dir", help="zoo directory (default: bundled cards)")
    z_search = zsub.add_parser("search", help="top-k cards for a modality and request")
    z_search.add_argument("--zoo", dest="zoo_dir")
    z_search.add_argument("--modality", required=True, choices=[m.value for m in table.Modality])
    z_search.add_argument("--query", default="")
    z_search.add_argument("-k", type=int, default=5)

    syn = sub.add_parser("synth", help="write the synthetic multimodal dataset")
    syn.add_argument("--out", required=True, help="output directory")
    syn.add_argument("--rows", type=int, default=500)
    syn.add_argument("--seed", type=int, default=7)

    cor = sub.add_parser("corrupt", help="mask cells and append noise columns")
    cor.add_argument("--table", required=True)
    cor.add_argument("--label", required=True)
    cor.add_argument("--out", required=True, help="output CSV; the plan is written next to it")
    cor.add_argument("--mask", type=float, default=0.2)
    cor.add_argument("--noise", type=int, default=3)
    cor.add_argument("--seed", type=int, default=0)
    return parser


def _offline_gateway() -> Gateway:
    return Gateway(GatewayConfig(mode="replay"), FixtureStore())


def _open_run(args) -> pipeline.Run:
    config = pipeline.load_run_config(args.config)
    if args.mode:
        config.gateway.mode = args.mode
    return pipeline.Run(config)


def _zoo_command(args) -> int:
    gateway = _offline_gateway()
    if args.zoo_command == "init":
        zoo.builtin_zoo(gateway).save(args.dir)
        print(f"wrote {len(zoo.builtin_cards())} cards to {args.dir}")
        return 0
    if args.zoo_command == "add":
        directory = Path(args.zoo_dir)
        z = zoo.ModelZoo.load(directory, gateway) if (directory / "cards").exists() else zoo.ModelZoo(gateway)
        card = zoo.ModelCard.from_json(json.loads(Path(args.card).read_text()))
        z.add_card(card)
        z.save(directory)
        print(f"added {card.name} as {card.card_id}")
        return 0
    z = zoo.ModelZoo.load(args.zoo_dir, gateway) if args.zoo_dir else zoo.builtin_zoo(gateway)
    if args.zoo_command == "list":
        for card in sorted(z.cards(), key=lambda c: c.name):
            mods = ",".join(m.value for m in card.sorted_modalities())
            print(f"{card.name}\t{mods}\t{card.output_feature_dim}")
        return 0
    query = gateway.embed(args.query) if args.query else np.zeros(z.embedding_dim)
    for card in z.retrieve_candidates(table.Modality(args.modality), args.query, args.k):
        score = float(zoo.cosine_scores(z.vector(card.card_id)[None, :], query)[0])
        print(f"{score:.4f}\t{card.name}")
    return 0


def _dispatch(args) -> int:
    if args.command == "zoo":
        return _zoo_command(args)
    if args.command == "synth":
        out = Path(args.out)
        t = table.generate_synthetic_dataset(args.rows, args.seed, sidecar_dir=out)
        table.save_table(t, out / "table.csv")
        print(f"wrote {out / 'table.csv'} ({t.n_rows} rows)")
        return 0
    if args.command == "corrupt":
        src = table.load_table(args.table, args.label)
        corrupted, plan = table.corrupt(src, args.mask, args.noise, args.seed)
        out = Path(args.out)
        table.save_table(corrupted, out)
        out.with_suffix(".plan.json").write_text(plan.dumps() + "\n")
        print(f"wrote {out}")
        return 0
    run = _open_run(args)
    if args.command == "run":
        report = run.run_all()
        print(json.dumps(report, indent=2))
        return 0
    stage = f"hpo-{args.hpo_command}" if args.command == "hpo" else STAGE_COMMANDS[args.command]
    run.run_stage(stage)
    print(f"{stage}: ok ({run.dir})")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (pipeline.ConfigError, pipeline.StageError, zoo.ZooError, table.TableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
